//! Brownian-perturbed particle flow: seeded path ensembles, explicit
//! integration of the displacement, grid-wise inversion of the flow map by
//! contraction, and the Jacobian fields with their diffeomorphism guards.
//!
//! The flow map is `eta(t, x) = x + shift(t) + zeta(t, x)` where `shift`
//! is the Brownian translation `eps B_t` and `zeta` is the displacement
//! the solver integrates. While `|grad zeta|_inf <= 1/(2d)` the map stays
//! a small perturbation of a translation: inversion is a contraction and
//! the inverse Jacobian stays within `1/d` of the identity.

use crate::fields::{weight, Field, GridSpec, Rank, SpaceParams};
use crate::linalg::{
    self, frobenius, frobenius_minus_identity, identity, invert, Mat3, Vec3, ZERO_VEC,
};
use crate::sobolev::{multi_indices, weighted_lp_norm, weighted_sup_norm};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(
        "diffeomorphism guard violated at t = {time:.6}: |grad zeta|_inf = {sup:.6} > 1/(2d) = {bound:.6}"
    )]
    DiffeoViolation { time: f64, sup: f64, bound: f64 },
    #[error(
        "flow inversion did not converge after {iterations} iterations: worst residual {residual:.3e} > {tol:.3e}"
    )]
    InversionNoConvergence { iterations: usize, residual: f64, tol: f64 },
    #[error("Jacobian determinant {det:.3e} fell below the Ostrowski floor {floor:.3e} at t = {time:.6}")]
    SingularJacobian { time: f64, det: f64, floor: f64 },
    #[error("field error: {0}")]
    Field(#[from] crate::fields::FieldError),
}

/// Uniform time mesh `t_0 = 0 .. t_K = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeMesh {
    pub t_end: f64,
    pub steps: usize,
}

impl TimeMesh {
    pub fn new(t_end: f64, dt_target: f64) -> TimeMesh {
        assert!(t_end > 0.0 && dt_target > 0.0);
        let steps = (t_end / dt_target).ceil().max(1.0) as usize;
        TimeMesh { t_end, steps }
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_end * k as f64 / self.steps as f64
    }
}

/// SplitMix64-style per-sample seed derivation; sample streams depend only
/// on (master seed, sample index), never on scheduling.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ (index.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// M independent d-dimensional Brownian paths on a time mesh, with the
/// running growth factor `lambda_t = 1 + eps sup_{s<=t} |B_s|` per path.
#[derive(Debug, Clone)]
pub struct BrownianEnsemble {
    pub d: usize,
    pub epsilon: f64,
    pub master_seed: u64,
    pub mesh: TimeMesh,
    /// increments[m][k] covers the step `t_k -> t_{k+1}`.
    increments: Vec<Vec<Vec3>>,
    /// paths[m][k] is `B_{t_k}`; `paths[m][0] = 0`.
    paths: Vec<Vec<Vec3>>,
    /// lambda[m][k] evaluated on the mesh (sup over mesh points).
    lambda: Vec<Vec<f64>>,
}

impl BrownianEnsemble {
    pub fn generate(
        d: usize,
        samples: usize,
        mesh: TimeMesh,
        epsilon: f64,
        master_seed: u64,
    ) -> BrownianEnsemble {
        let dt = mesh.dt();
        let normal = Normal::new(0.0, dt.sqrt()).unwrap();
        let per_sample: Vec<(Vec<Vec3>, Vec<Vec3>, Vec<f64>)> = (0..samples)
            .into_par_iter()
            .map(|m| {
                let mut rng =
                    rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(master_seed, m as u64));
                let mut incs = Vec::with_capacity(mesh.steps);
                let mut path = Vec::with_capacity(mesh.steps + 1);
                let mut lam = Vec::with_capacity(mesh.steps + 1);
                let mut b = ZERO_VEC;
                path.push(b);
                lam.push(1.0);
                let mut sup = 0.0f64;
                for _ in 0..mesh.steps {
                    let mut inc = ZERO_VEC;
                    for axis in inc.iter_mut().take(d) {
                        *axis = normal.sample(&mut rng);
                    }
                    incs.push(inc);
                    for a in 0..d {
                        b[a] += inc[a];
                    }
                    path.push(b);
                    sup = sup.max(linalg::vec_norm(b, d));
                    lam.push(1.0 + epsilon * sup);
                }
                (incs, path, lam)
            })
            .collect();
        let mut increments = Vec::with_capacity(samples);
        let mut paths = Vec::with_capacity(samples);
        let mut lambda = Vec::with_capacity(samples);
        for (i, p, l) in per_sample {
            increments.push(i);
            paths.push(p);
            lambda.push(l);
        }
        BrownianEnsemble { d, epsilon, master_seed, mesh, increments, paths, lambda }
    }

    pub fn samples(&self) -> usize {
        self.increments.len()
    }

    /// Shift applied to the flow over step k: `eps * (B_{k+1} - B_k)`.
    pub fn shift_delta(&self, m: usize, k: usize) -> Vec3 {
        let inc = self.increments[m][k];
        let mut out = ZERO_VEC;
        for a in 0..self.d {
            out[a] = self.epsilon * inc[a];
        }
        out
    }

    pub fn path_at(&self, m: usize, k: usize) -> Vec3 {
        self.paths[m][k]
    }

    pub fn lambda_at(&self, m: usize, k: usize) -> f64 {
        self.lambda[m][k]
    }
}

/// Running side-channel observations for one sample's flow.
#[derive(Debug, Clone, Default, Serialize)]
pub struct FlowMonitor {
    /// Sup of the pointwise Frobenius norm of grad zeta.
    pub grad_zeta_sup: f64,
    /// |zeta(t, 0)| at the box center.
    pub zeta_origin: f64,
    /// Grid points whose image left the box during drift sampling.
    pub boundary_exits: usize,
    /// Worst inversion residual |eta(kappa(x)) - x| over grid targets.
    pub inversion_residual: f64,
    /// Worst round-trip residual |kappa(eta(x)) - x| over grid nodes.
    pub roundtrip_residual: f64,
    /// Max pointwise Frobenius distance of grad kappa from the identity.
    pub kappa_identity_gap: f64,
    /// Max over the grid of w(eta(x)) / w(x).
    pub weight_ratio: f64,
}

/// Per-sample flow state at one time: displacement, Brownian shift,
/// inverse-map displacement, and both Jacobian fields.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub sample: usize,
    pub time: f64,
    /// Displacement zeta as a vector field on the grid.
    pub zeta: Field,
    /// Current Brownian translation `eps B_t`.
    pub shift: Vec3,
    /// Inverse map as a displacement: `kappa(x) = x + kappa_disp(x)`.
    pub kappa_disp: Field,
    /// Jacobian of zeta (matrix field); `grad eta = I + grad zeta`.
    pub grad_zeta: Field,
    /// Jacobian of the inverse map (matrix field).
    pub grad_kappa: Field,
    pub valid: bool,
    pub monitor: FlowMonitor,
}

const INVERSION_MAX_ITERS: usize = 50;
/// Relative inversion tolerance: residual <= 1e-10 * L.
const INVERSION_REL_TOL: f64 = 1e-10;

impl FlowState {
    pub fn initial(grid: GridSpec, sample: usize) -> FlowState {
        let ident = Field::from_fn_matrix(grid, |_| identity());
        FlowState {
            sample,
            time: 0.0,
            zeta: Field::zeros(grid, Rank::Vector),
            shift: ZERO_VEC,
            kappa_disp: Field::zeros(grid, Rank::Vector),
            grad_zeta: Field::zeros(grid, Rank::Matrix),
            grad_kappa: ident,
            valid: true,
            monitor: FlowMonitor::default(),
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.zeta.grid
    }

    /// Forward map at a grid node.
    pub fn eta_at(&self, flat: usize) -> Vec3 {
        let grid = self.grid();
        let x = grid.point(flat);
        let z = self.zeta.vector_at(flat);
        let mut out = ZERO_VEC;
        for a in 0..grid.d {
            out[a] = x[a] + self.shift[a] + z[a];
        }
        out
    }

    /// The guard bound `1/(2d)`.
    pub fn gradient_guard(&self) -> f64 {
        1.0 / (2.0 * self.grid().d as f64)
    }

    /// One explicit Euler step: `zeta += dt * drift(eta(x))`, then the
    /// Brownian shift advances. Jacobians are refreshed and the
    /// diffeomorphism guard enforced; on violation the state is marked
    /// invalid and the caller decides.
    pub fn advance(
        &mut self,
        drift: &Field,
        shift_delta: Vec3,
        dt: f64,
    ) -> Result<(), FlowError> {
        assert!(self.valid, "advancing an invalidated flow state");
        let grid = self.grid();
        let d = grid.d;
        let np = grid.point_count();
        let zeta_old = self.zeta.clone();
        let shift = self.shift;
        let exits: usize = {
            let results: Vec<(Vec3, bool)> = (0..np)
                .into_par_iter()
                .map(|flat| {
                    let x = grid.point(flat);
                    let z = zeta_old.vector_at(flat);
                    let mut eta = ZERO_VEC;
                    for a in 0..d {
                        eta[a] = x[a] + shift[a] + z[a];
                    }
                    let mut buf = [0.0f64; 3];
                    let clamped = drift.sample_into(&eta, &mut buf[..d]);
                    let mut znew = z;
                    for a in 0..d {
                        znew[a] += dt * buf[a];
                    }
                    (znew, clamped)
                })
                .collect();
            let mut exits = 0;
            for (flat, (znew, clamped)) in results.into_iter().enumerate() {
                self.zeta.set_vector_at(flat, znew);
                if clamped {
                    exits += 1;
                }
            }
            exits
        };
        self.monitor.boundary_exits += exits;
        for a in 0..d {
            self.shift[a] += shift_delta[a];
        }
        self.time += dt;
        self.refresh_gradient()?;
        Ok(())
    }

    fn refresh_gradient(&mut self) -> Result<(), FlowError> {
        self.grad_zeta = self.zeta.jacobian()?;
        let grid = self.grid();
        let mut sup = 0.0f64;
        for flat in 0..grid.point_count() {
            sup = sup.max(frobenius(&self.grad_zeta.matrix_at(flat), grid.d));
        }
        self.monitor.grad_zeta_sup = sup;
        self.monitor.zeta_origin =
            linalg::vec_norm(self.zeta.sample_vector(&ZERO_VEC), grid.d);
        let bound = self.gradient_guard();
        if sup > bound {
            self.valid = false;
            return Err(FlowError::DiffeoViolation { time: self.time, sup, bound });
        }
        Ok(())
    }

    /// Solve `eta(y) = target` by the damped fixed point
    /// `y <- target - shift - zeta(y)`, seeded at `target - shift -
    /// zeta(target)`. Under the gradient guard the map contracts at rate
    /// `<= 1/(2d)`.
    pub fn invert_at(&self, target: &Vec3) -> (Vec3, f64, usize) {
        let grid = self.grid();
        let d = grid.d;
        let z0 = self.zeta.sample_vector(target);
        let mut y = ZERO_VEC;
        for a in 0..d {
            y[a] = target[a] - self.shift[a] - z0[a];
        }
        let tol = INVERSION_REL_TOL * grid.half_width;
        let mut residual = f64::INFINITY;
        for it in 0..INVERSION_MAX_ITERS {
            let zy = self.zeta.sample_vector(&y);
            let mut eta_y = ZERO_VEC;
            for a in 0..d {
                eta_y[a] = y[a] + self.shift[a] + zy[a];
            }
            residual = linalg::vec_norm(linalg::vec_sub(eta_y, *target, d), d);
            if residual <= tol {
                return (y, residual, it);
            }
            for a in 0..d {
                y[a] = target[a] - self.shift[a] - zy[a];
            }
        }
        (y, residual, INVERSION_MAX_ITERS)
    }

    /// Grid-wise inversion: for every node x solve `eta(kappa(x)) = x` and
    /// store `kappa(x) - x`.
    pub fn invert_flow(&mut self) -> Result<(), FlowError> {
        let grid = self.grid();
        let d = grid.d;
        let np = grid.point_count();
        let results: Vec<(Vec3, f64)> = (0..np)
            .into_par_iter()
            .map(|flat| {
                let x = grid.point(flat);
                let (y, residual, _) = self.invert_at(&x);
                let mut disp = ZERO_VEC;
                for a in 0..d {
                    disp[a] = y[a] - x[a];
                }
                (disp, residual)
            })
            .collect();
        let mut worst = 0.0f64;
        for (flat, (disp, residual)) in results.into_iter().enumerate() {
            self.kappa_disp.set_vector_at(flat, disp);
            worst = worst.max(residual);
        }
        self.monitor.inversion_residual = worst;
        let tol = INVERSION_REL_TOL * grid.half_width;
        if worst > tol {
            return Err(FlowError::InversionNoConvergence {
                iterations: INVERSION_MAX_ITERS,
                residual: worst,
                tol,
            });
        }
        Ok(())
    }

    /// Refresh `grad kappa(x) = (grad eta(kappa(x)))^{-1}` from the stored
    /// inverse map, guarding the determinant from below.
    pub fn refresh_inverse_jacobian(&mut self) -> Result<(), FlowError> {
        let grid = self.grid();
        let d = grid.d;
        let np = grid.point_count();
        // Entrywise bound 1/(2d) on grad zeta gives row margins >= 1/2,
        // hence det >= 2^{-d} by Ostrowski's lower bound; half of that is
        // the runtime floor.
        let floor = 0.5 * 0.5f64.powi(d as i32);
        let results: Vec<Result<(Mat3, f64), FlowError>> = (0..np)
            .into_par_iter()
            .map(|flat| {
                let x = grid.point(flat);
                let disp = self.kappa_disp.vector_at(flat);
                let mut kx = ZERO_VEC;
                for a in 0..d {
                    kx[a] = x[a] + disp[a];
                }
                let gz = self.grad_zeta.sample_matrix(&kx);
                let mut ge = gz;
                for a in 0..d {
                    ge[a][a] += 1.0;
                }
                let det = linalg::det(&ge, d);
                match invert(&ge, d, floor) {
                    Some(gk) => Ok((gk, frobenius_minus_identity(&gk, d))),
                    None => Err(FlowError::SingularJacobian { time: self.time, det, floor }),
                }
            })
            .collect();
        let mut gap = 0.0f64;
        for (flat, res) in results.into_iter().enumerate() {
            let (gk, dev) = res?;
            self.grad_kappa.set_matrix_at(flat, &gk);
            gap = gap.max(dev);
        }
        self.monitor.kappa_identity_gap = gap;
        Ok(())
    }

    /// Grad eta at a node: `I + grad zeta`.
    pub fn grad_eta_at(&self, flat: usize) -> Mat3 {
        let mut m = self.grad_zeta.matrix_at(flat);
        for a in 0..self.grid().d {
            m[a][a] += 1.0;
        }
        m
    }

    /// Max over grid nodes of `|kappa(eta(x)) - x|`: the defining identity
    /// of the inverse, solved at off-grid targets.
    pub fn roundtrip_residual(&mut self) -> f64 {
        let grid = self.grid();
        let d = grid.d;
        let worst = (0..grid.point_count())
            .into_par_iter()
            .map(|flat| {
                let x = grid.point(flat);
                let eta = self.eta_at(flat);
                let (y, _, _) = self.invert_at(&eta);
                linalg::vec_norm(linalg::vec_sub(y, x, d), d)
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .fold(0.0f64, f64::max);
        self.monitor.roundtrip_residual = worst;
        worst
    }

    /// Max over the grid of `w(eta(x)) / w(x)`; bounded by a constant times
    /// `lambda_t` for valid states.
    pub fn weight_comparability(&mut self) -> f64 {
        let grid = self.grid();
        let d = grid.d;
        let mut worst = 0.0f64;
        for flat in 0..grid.point_count() {
            let x = grid.point(flat);
            let eta = self.eta_at(flat);
            worst = worst.max(weight(&eta[..d]) / weight(&x[..d]));
        }
        self.monitor.weight_ratio = worst;
        worst
    }
}

/// One row of the growth-monitor table.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthRow {
    pub name: String,
    pub order: usize,
    pub raw: f64,
    /// `raw / (t lambda_t^power)`; absent at t = 0.
    pub normalized: Option<f64>,
    pub power: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub time: f64,
    pub lambda: f64,
    pub rows: Vec<GrowthRow>,
}

/// Weighted growth quantities of one flow state: `w^{sigma-1} zeta` in sup
/// and L_p, `w^{sigma+k-1} D^k zeta` sup for `k <= l_cap`, and
/// `w^{sigma+k} D^k grad kappa` in L_p, each normalized by `t lambda^power`.
/// The kappa powers are a monitoring heuristic mirroring the weight
/// exponents; only the trend across a run is acted on.
pub fn growth_monitor(
    state: &FlowState,
    lambda: f64,
    space: &SpaceParams,
    l_cap: usize,
) -> Result<GrowthReport, FlowError> {
    let sigma = space.sigma();
    let p = space.p;
    let t = state.time;
    let normalize = |raw: f64, power: f64| -> Option<f64> {
        if t > 0.0 {
            Some(raw / (t * lambda.powf(power)))
        } else {
            None
        }
    };
    let mut rows = Vec::new();
    let sup0 = weighted_sup_norm(&state.zeta, sigma - 1.0);
    rows.push(GrowthRow {
        name: "zeta sup".into(),
        order: 0,
        raw: sup0,
        normalized: normalize(sup0, sigma - 1.0),
        power: sigma - 1.0,
    });
    let lp0 = weighted_lp_norm(&state.zeta, sigma - 1.0, p);
    rows.push(GrowthRow {
        name: "zeta Lp".into(),
        order: 0,
        raw: lp0,
        normalized: normalize(lp0, sigma - 1.0),
        power: sigma - 1.0,
    });
    let d = state.grid().d;
    for k in 1..=l_cap {
        let power = sigma + k as f64 - 1.0;
        let mut sup = 0.0f64;
        for gamma in multi_indices(d, k) {
            let df = state.zeta.derivative(&gamma)?;
            sup = sup.max(weighted_sup_norm(&df, power));
        }
        rows.push(GrowthRow {
            name: format!("D^{k} zeta sup"),
            order: k,
            raw: sup,
            normalized: normalize(sup, power),
            power,
        });
    }
    for k in 1..=l_cap {
        let power = sigma + k as f64;
        let mut acc = 0.0f64;
        for gamma in multi_indices(d, k) {
            let dk = state.grad_kappa.derivative(&gamma)?;
            acc += weighted_lp_norm(&dk, power, p).powf(p);
        }
        let raw = acc.powf(1.0 / p);
        rows.push(GrowthRow {
            name: format!("D^{k} grad kappa Lp"),
            order: k,
            raw,
            normalized: normalize(raw, power),
            power,
        });
    }
    Ok(GrowthReport { time: t, lambda, rows })
}
