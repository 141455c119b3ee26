//! The acceptance criteria as runnable checks with pinned tolerances.
//! Each criterion prints one pass/fail line; the same functions back the
//! `verify` CLI verb and the acceptance test target.

use crate::cli;
use crate::corpus::{scalar_corpus, vector_corpus};
use crate::fields::{Field, GridSpec, SpaceParams};
use crate::flow::FlowState;
use crate::lagrangian::{
    expect_over_ensemble, kernel_drift, pullback_momentum, ForcingSpec, MomentumFields,
};
use crate::linalg::pairwise_sum;
use crate::potential::{boundedness_probe, PotentialOperator, ProjectionMethod};
use crate::reference::{lamb_oseen, stationary_euler_vortex, OracleSolution};
use crate::sobolev::ap_check;
use crate::solver::{
    choose_horizon, picard_iterate, solve, HorizonMode, SolveOutput, SolverConfig, SolverError,
};
use serde::Serialize;
use std::sync::OnceLock;
use std::time::Instant;

// Pinned budgets. Each constant is the number stated by the acceptance
// contract; none are tuned at runtime.
const C1_GRADIENT_TOL: f64 = 0.01;
const C1_STREAM_TOL: f64 = 0.01;
const C1_CROSS_METHOD_TOL: f64 = 0.02;
const C2_ORTHOGONALITY_TOL: f64 = 1e-3;
const C3_NEWTON_CONSTANT: f64 = 5.0;
const C3_REFINEMENT_RATIO: f64 = 0.5;
const C4_STABILITY_FACTOR: f64 = 2.0;
const C5_ROUNDTRIP_REL: f64 = 1e-8;
const C6_KERNEL_ID_TOL: f64 = 0.03;
const C7_FORM_TOL: f64 = 0.03;
const C8_MIN_DECREASES: usize = 4;
const C8_FINAL_FRACTION: f64 = 0.1;
const C9_L2_TOL: f64 = 0.05;
const C10_L2_TOL: f64 = 0.02;
const C11_RATIO_LOW: f64 = 1.5;
const C11_RATIO_HIGH: f64 = 2.5;
const C13_AP_UNIT_TOL: f64 = 1e-6;
const C13_STABILITY: f64 = 1.25;

const INTERIOR_MARGIN: usize = 3;

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: &'static str,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:2} {:34} value {:10.3e}  budget {:10.3e}  ({:6.1}s)  {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.value,
            self.threshold,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Operators,
    Flow,
    Solver,
    Statistics,
    All,
}

impl Suite {
    pub fn parse(name: &str) -> Option<Suite> {
        match name {
            "operators" => Some(Suite::Operators),
            "flow" => Some(Suite::Flow),
            "solver" => Some(Suite::Solver),
            "statistics" => Some(Suite::Statistics),
            "all" => Some(Suite::All),
            _ => None,
        }
    }

    pub fn criteria(&self) -> Vec<usize> {
        match self {
            Suite::Operators => vec![1, 2, 3, 4, 13],
            Suite::Flow => vec![5, 12],
            Suite::Solver => vec![6, 7, 8, 9, 10, 14],
            Suite::Statistics => vec![11],
            Suite::All => (1..=14).collect(),
        }
    }
}

/// Shared state across criteria: the baseline viscous-vortex solve is used
/// by the round-trip check and the regression check.
#[derive(Default)]
pub struct Context {
    base: OnceLock<Result<BaseRun, String>>,
}

struct BaseRun {
    config: SolverConfig,
    oracle: OracleSolution,
    output: SolveOutput,
}

fn acceptance_space(epsilon: f64) -> SpaceParams {
    SpaceParams::new(2, 4.0, 4, 1.6, 0.0, epsilon).unwrap()
}

fn grid2(n: usize) -> GridSpec {
    GridSpec::new(2, 6.0, n).unwrap()
}

/// The baseline scenario: diffusing vortex, n = 64, M = 32, eps^2 = 0.02,
/// horizon measured by the dry run.
fn base_config() -> (SolverConfig, Field, OracleSolution) {
    let epsilon = 0.02f64.sqrt();
    let grid = grid2(64);
    let mut config = SolverConfig::new(acceptance_space(epsilon), grid, 32);
    config.t_max = 1.0;
    config.dt = 0.05;
    config.horizon = HorizonMode::Auto;
    config.max_picard = 10;
    config.tol_picard = 2e-3;
    config.master_seed = 2024;
    let oracle = lamb_oseen(2.0, 25.0, epsilon * epsilon / 2.0);
    let u0 = oracle.as_field(grid, 0.0);
    (config, u0, oracle)
}

impl Context {
    fn base(&self) -> &Result<BaseRun, String> {
        self.base.get_or_init(|| {
            let (config, u0, oracle) = base_config();
            match solve(&config, &u0, &ForcingSpec::zero()) {
                Ok(output) => Ok(BaseRun { config, oracle, output }),
                Err(e) => Err(e.to_string()),
            }
        })
    }
}

fn interior_sup_gap(a: &Field, b: &Field, margin: usize) -> f64 {
    let grid = a.grid;
    let mut worst = 0.0f64;
    for c in 0..a.component_count() {
        let ca = a.component(c);
        let cb = b.component(c);
        for (flat, idx) in grid.index_iter() {
            if grid.is_interior(&idx, margin) {
                worst = worst.max((ca[flat] - cb[flat]).abs());
            }
        }
    }
    worst
}

fn interior_sup(a: &Field, margin: usize) -> f64 {
    let grid = a.grid;
    let mut worst = 0.0f64;
    for c in 0..a.component_count() {
        let ca = a.component(c);
        for (flat, idx) in grid.index_iter() {
            if grid.is_interior(&idx, margin) {
                worst = worst.max(ca[flat].abs());
            }
        }
    }
    worst
}

/// Relative L2 error over the interior, optionally excluding a core disk
/// around the origin.
fn relative_l2_error(got: &Field, want: &Field, margin: usize, core_radius: f64) -> f64 {
    let grid = got.grid;
    let mut num = 0.0;
    let mut den = 0.0;
    for (flat, idx) in grid.index_iter() {
        if !grid.is_interior(&idx, margin) {
            continue;
        }
        let x = grid.point(flat);
        let r2: f64 = (0..grid.d).map(|a| x[a] * x[a]).sum();
        if r2 < core_radius * core_radius {
            continue;
        }
        for c in 0..got.component_count() {
            let g = got.component(c)[flat];
            let w = want.component(c)[flat];
            num += (g - w) * (g - w);
            den += w * w;
        }
    }
    (num / den.max(1e-300)).sqrt()
}

pub fn run_criterion(id: usize, ctx: &Context) -> CriterionResult {
    let start = Instant::now();
    let mut r = match id {
        1 => criterion_projection(),
        2 => criterion_orthogonality(),
        3 => criterion_newton_inversion(),
        4 => criterion_boundedness_stability(),
        5 => criterion_roundtrip(ctx),
        6 => criterion_kernel_identity(),
        7 => criterion_kernel_forms(),
        8 => criterion_picard_signature(),
        9 => criterion_viscous_regression(ctx),
        10 => criterion_inviscid_regression(),
        11 => criterion_monte_carlo_scaling(),
        12 => criterion_guard_enforcement(),
        13 => criterion_weight_class(),
        14 => criterion_determinism(),
        _ => panic!("unknown criterion {id}"),
    };
    r.seconds = start.elapsed().as_secs_f64();
    r
}

pub fn run_suite(suite: Suite) -> Vec<CriterionResult> {
    let ctx = Context::default();
    suite.criteria().into_iter().map(|id| run_criterion(id, &ctx)).collect()
}

fn result(
    id: usize,
    name: &'static str,
    pass: bool,
    value: f64,
    threshold: f64,
    detail: String,
) -> CriterionResult {
    CriterionResult { id, name, pass, value, threshold, detail, seconds: 0.0 }
}

// 1. Projection correctness at n = 64: pure gradients die, stream fields
//    survive, and the two convolution routes agree.
fn criterion_projection() -> CriterionResult {
    let grid = grid2(64);
    let op = PotentialOperator::new(grid);
    let s2 = 1.69;
    let grad = Field::from_fn_vector(grid, |x| {
        let e = (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp();
        [-x[0] / s2 * e, -x[1] / s2 * e, 0.0]
    });
    let stream = Field::from_fn_vector(grid, |x| {
        let e = (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp();
        [-x[1] / s2 * e, x[0] / s2 * e, 0.0]
    });
    let mut worst_grad = 0.0f64;
    let mut worst_stream = 0.0f64;
    for method in [ProjectionMethod::Quadrature, ProjectionMethod::Spectral] {
        let pg = op.project(&grad, method).unwrap();
        worst_grad = worst_grad.max(pg.solenoidal_part.max_abs() / grad.max_abs());
        let ps = op.project(&stream, method).unwrap();
        worst_stream =
            worst_stream.max(ps.solenoidal_part.minus(&stream).max_abs() / stream.max_abs());
    }
    let v = &vector_corpus(grid, 1, 2024)[0];
    let q = op.project(v, ProjectionMethod::Quadrature).unwrap().solenoidal_part;
    let s = op.project(v, ProjectionMethod::Spectral).unwrap().solenoidal_part;
    let cross = interior_sup_gap(&q, &s, INTERIOR_MARGIN) / v.max_abs();
    let pass = worst_grad <= C1_GRADIENT_TOL
        && worst_stream <= C1_STREAM_TOL
        && cross <= C1_CROSS_METHOD_TOL;
    result(
        1,
        "projection-correctness",
        pass,
        worst_grad.max(worst_stream).max(cross),
        C1_CROSS_METHOD_TOL,
        format!("gradient {worst_grad:.2e} (<= {C1_GRADIENT_TOL}), stream {worst_stream:.2e} (<= {C1_STREAM_TOL}), cross-method {cross:.2e} (<= {C1_CROSS_METHOD_TOL})"),
    )
}

// 2. Orthogonality of the two projection parts over a 20-pair corpus.
fn criterion_orthogonality() -> CriterionResult {
    let grid = grid2(64);
    let op = PotentialOperator::new(grid);
    let fields = vector_corpus(grid, 40, 777);
    let hd = grid.cell_volume();
    let l2 = |f: &Field| -> f64 {
        let mut total = 0.0;
        for c in 0..f.component_count() {
            let sq: Vec<f64> = f.component(c).iter().map(|v| v * v).collect();
            total += pairwise_sum(&sq);
        }
        (total * hd).sqrt()
    };
    let mut worst = 0.0f64;
    for pair in fields.chunks(2) {
        let g = op.project(&pair[0], ProjectionMethod::Spectral).unwrap().gradient_part;
        let s = op.project(&pair[1], ProjectionMethod::Spectral).unwrap().solenoidal_part;
        let mut terms = vec![0.0; grid.point_count()];
        for c in 0..2 {
            for (t, (a, b)) in
                terms.iter_mut().zip(g.component(c).iter().zip(s.component(c).iter()))
            {
                *t += a * b;
            }
        }
        let inner = (pairwise_sum(&terms) * hd).abs();
        worst = worst.max(inner / (l2(&pair[0]) * l2(&pair[1])));
    }
    result(
        2,
        "helmholtz-orthogonality",
        worst <= C2_ORTHOGONALITY_TOL,
        worst,
        C2_ORTHOGONALITY_TOL,
        "max normalized inner product over 20 pairs".into(),
    )
}

// 3. Discrete Laplacian inverts the Newtonian potential at O(h^2), with
//    the rate confirmed at one exact halving of h.
fn criterion_newton_inversion() -> CriterionResult {
    let coarse = grid2(48);
    let fine = grid2(95); // 2n - 1: h exactly halves
    let bumps = scalar_corpus(coarse, 5, 4242);
    let err_on = |grid: GridSpec| -> f64 {
        let op = PotentialOperator::new(grid);
        let mut worst_rel = 0.0f64;
        for b in &bumps {
            let f = b.as_field(grid);
            let lap = op.newton_potential(&f).laplacian();
            let gap = interior_sup_gap(&lap, &f, INTERIOR_MARGIN);
            worst_rel = worst_rel.max(gap / f.max_abs());
        }
        worst_rel
    };
    let e_coarse = err_on(coarse);
    let e_fine = err_on(fine);
    let h = coarse.h();
    let budget = C3_NEWTON_CONSTANT * h * h;
    let ratio = e_fine / e_coarse.max(1e-300);
    let pass = e_coarse <= budget && ratio <= C3_REFINEMENT_RATIO;
    result(
        3,
        "newton-inversion",
        pass,
        e_coarse,
        budget,
        format!("rel err {e_coarse:.2e} at n=48 (budget {budget:.2e}); halving ratio {ratio:.2} (<= {C3_REFINEMENT_RATIO})"),
    )
}

// 4. The operator-norm surrogate of the gradient-kernel convolution stays
//    within 2x across a refinement.
fn criterion_boundedness_stability() -> CriterionResult {
    let space = acceptance_space(0.0);
    let max_ratio = |n: usize| -> f64 {
        let grid = grid2(n);
        let op = PotentialOperator::new(grid);
        let corpus: Vec<Field> =
            scalar_corpus(grid, 6, 55).iter().map(|b| b.as_field(grid)).collect();
        boundedness_probe(&op, &corpus, &space, 2).unwrap().max
    };
    let coarse = max_ratio(48);
    let fine = max_ratio(64);
    let change = (fine / coarse).max(coarse / fine);
    result(
        4,
        "operator-boundedness-stability",
        change < C4_STABILITY_FACTOR,
        change,
        C4_STABILITY_FACTOR,
        format!("max ratio {coarse:.3} at n=48 vs {fine:.3} at n=64"),
    )
}

// 5. Inline flow checks of the baseline solve: round-trip residual and the
//    inverse-Jacobian identity gap.
fn criterion_roundtrip(ctx: &Context) -> CriterionResult {
    match ctx.base() {
        Err(e) => result(5, "flow-round-trip", false, f64::NAN, 0.0, format!("base run failed: {e}")),
        Ok(base) => {
            let l = base.config.grid.half_width;
            let d = base.config.grid.d as f64;
            let rt = base.output.guard_summary.roundtrip_max;
            let gap = base.output.guard_summary.kappa_identity_gap_max;
            let pass = rt <= C5_ROUNDTRIP_REL * l && gap < 1.0 / d;
            result(
                5,
                "flow-round-trip",
                pass,
                rt,
                C5_ROUNDTRIP_REL * l,
                format!("roundtrip {rt:.2e} (<= {:.2e}); |grad kappa - I| {gap:.3} (< {:.3})", C5_ROUNDTRIP_REL * l, 1.0 / d),
            )
        }
    }
}

// 6. At t = 0 the kernel drift built from grad u0 equals the solenoidal
//    projection of u0, across the two convolution routes.
fn criterion_kernel_identity() -> CriterionResult {
    let grid = grid2(64);
    let op = PotentialOperator::new(grid);
    let s2 = 1.21;
    let u0 = Field::from_fn_vector(grid, |x| {
        let e = (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp();
        [-x[1] / s2 * e, x[0] / s2 * e, 0.0]
    });
    let h = u0.jacobian().unwrap();
    let state = FlowState::initial(grid, 0);
    let k = kernel_drift(&state, &h, &op, ProjectionMethod::Spectral);
    let s = op.project(&u0, ProjectionMethod::Quadrature).unwrap().solenoidal_part;
    let scale = interior_sup(&s, INTERIOR_MARGIN);
    let gap = interior_sup_gap(&k, &s, INTERIOR_MARGIN) / scale;
    result(
        6,
        "kernel-identity-t0",
        gap <= C6_KERNEL_ID_TOL,
        gap,
        C6_KERNEL_ID_TOL,
        "spectral drift vs quadrature projection of initial data".into(),
    )
}

// 7. Simplified antisymmetric-pullback drift vs the direct projected
//    pullback of the momentum, mid-horizon on a forced scenario.
fn criterion_kernel_forms() -> CriterionResult {
    let epsilon = 0.02f64.sqrt();
    let grid = grid2(48);
    let mut config = SolverConfig::new(acceptance_space(epsilon), grid, 8);
    config.t_max = 1.0;
    config.dt = 0.05;
    config.max_picard = 8;
    config.tol_picard = 2e-3;
    config.master_seed = 99;
    let oracle = lamb_oseen(2.0, 25.0, epsilon * epsilon / 2.0);
    let u0 = oracle.as_field(grid, 0.0);
    let forcing = ForcingSpec {
        forcing: crate::lagrangian::Forcing::SolenoidalGaussian {
            amplitude: 0.3,
            width: 1.5,
            center: [0.5, -0.3, 0.0],
            modulation: crate::lagrangian::TimeModulation::Cosine { omega: 2.0 },
        },
        div_tolerance: 0.05,
    };
    let horizon = match choose_horizon(&config, &u0, &forcing) {
        Ok(r) => r.horizon,
        Err(e) => {
            return result(7, "kernel-simplified-vs-direct", false, f64::NAN, C7_FORM_TOL, format!("horizon probe failed: {e}"))
        }
    };
    let outcome = match picard_iterate(&config, horizon, &u0, &forcing) {
        Ok(o) => o,
        Err(e) => {
            return result(7, "kernel-simplified-vs-direct", false, f64::NAN, C7_FORM_TOL, format!("iteration failed: {e}"))
        }
    };
    // Replay the converged drift to the mid-horizon mesh point.
    let mesh = outcome.mesh;
    let half = (mesh.steps / 2).max(1);
    let op = PotentialOperator::new(grid);
    let m = config.samples;
    let mut frames: Vec<(FlowState, MomentumFields)> = (0..m)
        .map(|s| (FlowState::initial(grid, s), MomentumFields::initial(&u0).unwrap()))
        .collect();
    for k in 0..half {
        let t_k = mesh.time(k);
        for (s, (state, momenta)) in frames.iter_mut().enumerate() {
            momenta.accumulate(state, &forcing, t_k, mesh.dt());
            state
                .advance(&outcome.drift[k], outcome.ensemble.shift_delta(s, k), mesh.dt())
                .unwrap();
            state.invert_flow().unwrap();
            state.refresh_inverse_jacobian().unwrap();
        }
    }
    let simplified: Vec<Field> = frames
        .iter()
        .map(|(state, momenta)| kernel_drift(state, &momenta.h, &op, ProjectionMethod::Spectral))
        .collect();
    let direct: Vec<Field> = frames
        .iter()
        .map(|(state, momenta)| {
            let pre = pullback_momentum(state, &momenta.g);
            op.project(&pre, ProjectionMethod::Spectral).unwrap().solenoidal_part
        })
        .collect();
    let simplified = expect_over_ensemble(&simplified).unwrap();
    let direct = expect_over_ensemble(&direct).unwrap();
    let scale = interior_sup(&direct, INTERIOR_MARGIN);
    let gap = interior_sup_gap(&simplified, &direct, INTERIOR_MARGIN) / scale;
    result(
        7,
        "kernel-simplified-vs-direct",
        gap <= C7_FORM_TOL,
        gap,
        C7_FORM_TOL,
        format!("mid-horizon t = {:.3} on a forced scenario", mesh.time(half)),
    )
}

// 8. The Cauchy differences of the iteration decrease monotonically and
//    collapse by at least 10x.
fn criterion_picard_signature() -> CriterionResult {
    let (mut config, u0, _) = base_config();
    config.tol_picard = 1e-9; // run the full budget
    config.max_picard = 6;
    let horizon = match choose_horizon(&config, &u0, &ForcingSpec::zero()) {
        Ok(r) => r.horizon,
        Err(e) => {
            return result(8, "picard-convergence-signature", false, f64::NAN, C8_FINAL_FRACTION, format!("horizon probe failed: {e}"))
        }
    };
    let outcome = match picard_iterate(&config, horizon, &u0, &ForcingSpec::zero()) {
        Ok(o) => o,
        Err(e) => {
            return result(8, "picard-convergence-signature", false, f64::NAN, C8_FINAL_FRACTION, format!("iteration failed: {e}"))
        }
    };
    let diffs: Vec<f64> = outcome.trace.records.iter().map(|r| r.cauchy_diff).collect();
    let decreases = diffs.windows(2).take_while(|w| w[1] < w[0]).count();
    let final_fraction = diffs.last().unwrap() / diffs[0];
    let pass = decreases >= C8_MIN_DECREASES && final_fraction < C8_FINAL_FRACTION;
    result(
        8,
        "picard-convergence-signature",
        pass,
        final_fraction,
        C8_FINAL_FRACTION,
        format!("diffs {:?}, {decreases} consecutive decreases", diffs.iter().map(|d| format!("{d:.2e}")).collect::<Vec<_>>()),
    )
}

// 9. Viscous regression against the diffusing-vortex closed form, with a
//    refined run (M x4, h halved) that must do better.
fn criterion_viscous_regression(ctx: &Context) -> CriterionResult {
    let base = match ctx.base() {
        Ok(b) => b,
        Err(e) => {
            return result(9, "viscous-vortex-regression", false, f64::NAN, C9_L2_TOL, format!("base run failed: {e}"))
        }
    };
    let grid = base.config.grid;
    let t_end = *base.output.times.last().unwrap();
    let exact = base.oracle.as_field(grid, t_end);
    let core = 2.0 * grid.h();
    let err_base =
        relative_l2_error(base.output.u_series.last().unwrap(), &exact, INTERIOR_MARGIN, core);

    // Refined run: n 64 -> 128, M 32 -> 128, same horizon.
    let fine_grid = grid2(128);
    let mut fine_config = base.config.clone();
    fine_config.grid = fine_grid;
    fine_config.samples = 128;
    fine_config.horizon = HorizonMode::Fixed;
    fine_config.t_max = base.output.horizon;
    let fine_u0 = base.oracle.as_field(fine_grid, 0.0);
    let fine_out = match solve(&fine_config, &fine_u0, &ForcingSpec::zero()) {
        Ok(o) => o,
        Err(e) => {
            return result(9, "viscous-vortex-regression", false, err_base, C9_L2_TOL, format!("refined run failed: {e}"))
        }
    };
    let fine_exact = base.oracle.as_field(fine_grid, *fine_out.times.last().unwrap());
    let err_fine = relative_l2_error(
        fine_out.u_series.last().unwrap(),
        &fine_exact,
        2 * INTERIOR_MARGIN, // same physical interior margin
        2.0 * grid.h(),      // same physical core exclusion
    );
    let pass = err_base <= C9_L2_TOL && err_fine < err_base;
    result(
        9,
        "viscous-vortex-regression",
        pass,
        err_base,
        C9_L2_TOL,
        format!("rel L2 {err_base:.3e} at n=64/M=32; refined {err_fine:.3e} at n=128/M=128 over T = {t_end:.3}"),
    )
}

// 10. Inviscid stationary vortex: the solver must hold it still.
fn criterion_inviscid_regression() -> CriterionResult {
    let grid = grid2(64);
    let mut config = SolverConfig::new(acceptance_space(0.0), grid, 1);
    config.t_max = 1.0;
    config.dt = 0.05;
    config.max_picard = 10;
    config.tol_picard = 2e-3;
    let oracle = stationary_euler_vortex(0.5, 1.0);
    let u0 = oracle.as_field(grid, 0.0);
    let out = match solve(&config, &u0, &ForcingSpec::zero()) {
        Ok(o) => o,
        Err(e) => {
            return result(10, "inviscid-vortex-regression", false, f64::NAN, C10_L2_TOL, format!("run failed: {e}"))
        }
    };
    let mut worst = 0.0f64;
    for u in &out.u_series {
        worst = worst.max(relative_l2_error(u, &u0, INTERIOR_MARGIN, 0.0));
    }
    result(
        10,
        "inviscid-vortex-regression",
        worst <= C10_L2_TOL,
        worst,
        C10_L2_TOL,
        format!("max rel L2 drift over [0, {:.3}]", out.horizon),
    )
}

// 11. Monte-Carlo standard error at probe points scales like M^{-1/2}.
fn criterion_monte_carlo_scaling() -> CriterionResult {
    let epsilon = 0.02f64.sqrt();
    let grid = grid2(48);
    let oracle = lamb_oseen(2.0, 25.0, epsilon * epsilon / 2.0);
    let u0 = oracle.as_field(grid, 0.0);
    let probes: Vec<[f64; 3]> = (0..10)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / 10.0;
            [1.5 * a.cos(), 1.5 * a.sin(), 0.0]
        })
        .collect();
    let stderr_for = |m: usize| -> Result<f64, SolverError> {
        let mut config = SolverConfig::new(acceptance_space(epsilon), grid, m);
        config.t_max = 0.2;
        config.dt = 0.05;
        config.horizon = HorizonMode::Fixed;
        config.max_picard = 8;
        config.tol_picard = 5e-3;
        config.master_seed = 31337;
        let out = solve(&config, &u0, &ForcingSpec::zero())?;
        let std = out.u_std_series.last().unwrap();
        let mut acc = 0.0;
        for p in &probes {
            let s = std.sample_vector(p);
            acc += (s[0] * s[0] + s[1] * s[1]).sqrt();
        }
        Ok(acc / probes.len() as f64 / (m as f64).sqrt())
    };
    let (e16, e64, e256) = match (stderr_for(16), stderr_for(64), stderr_for(256)) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (a, b, c) => {
            let msg = [a.err(), b.err(), c.err()]
                .into_iter()
                .flatten()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join("; ");
            return result(11, "monte-carlo-scaling", false, f64::NAN, C11_RATIO_HIGH, msg);
        }
    };
    let r1 = e16 / e64;
    let r2 = e64 / e256;
    let pass = (C11_RATIO_LOW..=C11_RATIO_HIGH).contains(&r1)
        && (C11_RATIO_LOW..=C11_RATIO_HIGH).contains(&r2);
    result(
        11,
        "monte-carlo-scaling",
        pass,
        r1.max(r2),
        C11_RATIO_HIGH,
        format!("stderr ratios {r1:.2} (16->64) and {r2:.2} (64->256), want 2 +/- 25%"),
    )
}

// 12. Oversized data must trip a guard with the condition named.
fn criterion_guard_enforcement() -> CriterionResult {
    let grid = grid2(32);
    let mut config = SolverConfig::new(acceptance_space(0.0), grid, 1);
    config.t_max = 2.0;
    config.dt = 0.5;
    config.horizon = HorizonMode::Fixed;
    let u0 = stationary_euler_vortex(25.0, 1.0).as_field(grid, 0.0); // 50x baseline
    match solve(&config, &u0, &ForcingSpec::zero()) {
        Err(SolverError::GuardViolation { condition, time, .. }) => {
            let name = condition.to_string();
            let pass = name.contains("(i)") || name.contains("(ii)");
            result(12, "horizon-guard-enforcement", pass, time, 2.0, format!("violated {name} at t = {time:.3}"))
        }
        Err(other) => result(12, "horizon-guard-enforcement", false, f64::NAN, 2.0, format!("unexpected error: {other}")),
        Ok(_) => result(12, "horizon-guard-enforcement", false, f64::NAN, 2.0, "run unexpectedly succeeded".into()),
    }
}

// 13. Weight-class product: exactly 1 at zero exponent, bounded and stable
//     at the working exponent.
fn criterion_weight_class() -> CriterionResult {
    let space = acceptance_space(0.0);
    let unit = ap_check(2, 6.0, 0.0, 4.0, 50).unwrap().worst;
    let unit_gap = (unit - 1.0).abs();
    let a = ap_check(2, 6.0, space.sigma(), 4.0, 100).unwrap().worst;
    let b = ap_check(2, 6.0, space.sigma(), 4.0, 200).unwrap().worst;
    let stable = b.is_finite() && a.is_finite() && b <= C13_STABILITY * a;
    let pass = unit_gap <= C13_AP_UNIT_TOL && stable;
    result(
        13,
        "weight-class-sanity",
        pass,
        unit_gap,
        C13_AP_UNIT_TOL,
        format!("unit product gap {unit_gap:.2e}; working-exponent bound {a:.3} -> {b:.3} under sample doubling"),
    )
}

// 14. Bitwise determinism across worker counts and re-runs.
fn criterion_determinism() -> CriterionResult {
    const CONFIG: &str = r#"
[space]
d = 2
p = 4.0
l = 4
theta = 1.6

[grid]
n = 48
half_width = 6.0

[ensemble]
samples = 8
epsilon = 0.1414213562373095
master_seed = 7

[solver]
t_max = 0.2
dt = 0.05
horizon = "fixed"
max_picard = 6
tol_picard = 1e-2

[scenario]
initial = "lamb-oseen"
circulation = 2.0
core_age = 25.0
"#;
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return result(14, "determinism-across-workers", false, f64::NAN, 0.0, e.to_string()),
    };
    let cfg_path = dir.path().join("det.toml");
    if let Err(e) = std::fs::write(&cfg_path, CONFIG) {
        return result(14, "determinism-across-workers", false, f64::NAN, 0.0, e.to_string());
    }
    let mut dumps: Vec<Vec<Vec<u8>>> = Vec::new();
    for (label, workers) in [("w1", 1usize), ("w8", 8usize), ("w1-again", 1usize)] {
        let out_root = dir.path().join(label);
        match cli::run(&cfg_path, &out_root, Some(workers)) {
            Ok((record, run_dir)) => {
                let mut files = Vec::new();
                for k in 0..record.times.len() {
                    files.push(std::fs::read(run_dir.join(format!("u/u_{k:04}.fld"))).unwrap());
                }
                dumps.push(files);
            }
            Err(e) => {
                return result(14, "determinism-across-workers", false, f64::NAN, 0.0, format!("{label}: {e}"))
            }
        }
    }
    let same = dumps[0] == dumps[1] && dumps[0] == dumps[2];
    result(
        14,
        "determinism-across-workers",
        same,
        if same { 0.0 } else { 1.0 },
        0.0,
        "u-series byte equality across workers {1, 8} and re-run".into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::KernelTable;

    #[test]
    fn suites_cover_all_criteria_once() {
        let mut all: Vec<usize> = [Suite::Operators, Suite::Flow, Suite::Solver, Suite::Statistics]
            .iter()
            .flat_map(|s| s.criteria())
            .collect();
        all.sort_unstable();
        assert_eq!(all, (1..=14).collect::<Vec<_>>());
        assert_eq!(Suite::All.criteria().len(), 14);
        assert!(Suite::parse("operators").is_some());
        assert!(Suite::parse("bogus").is_none());
    }

    #[test]
    fn broken_kernel_normalization_fails_projection_idempotence() {
        // Mutation check: scale the gradient kernel tables by 1.1 and the
        // quadrature projector stops being idempotent at any sane budget.
        let grid = grid2(32);
        let mut table = KernelTable::build(grid);
        for g in table.grad.iter_mut() {
            for v in g.iter_mut() {
                *v *= 1.1;
            }
        }
        let op = PotentialOperator::with_table(grid, table);
        let v = &vector_corpus(grid, 1, 3)[0];
        let s1 = op.project(v, ProjectionMethod::Quadrature).unwrap().solenoidal_part;
        let s2 = op.project(&s1, ProjectionMethod::Quadrature).unwrap().solenoidal_part;
        let gap = s2.minus(&s1).max_abs();
        assert!(
            gap > 0.02 * v.max_abs(),
            "broken normalization went undetected: gap {gap}"
        );
    }
}
