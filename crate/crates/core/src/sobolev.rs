//! Weighted Sobolev norms by grid quadrature, weighted sup-norms, and
//! empirical checks of the product (ring) and Muckenhoupt-type weight
//! properties the solver's estimates rest on.
//!
//! The weight is always evaluated analytically at quadrature points rather
//! than sampled from a stored field. Grid sums use deterministic pairwise
//! reduction so results do not depend on thread count.

use crate::fields::{weight, Field, FieldError, SpaceParams};
use crate::linalg::pairwise_sum;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;

/// Norm parameters: order `l`, weight offset `delta`, integrability `p`.
///
/// The per-order weight exponent is `delta - l + k - d/p`; pairing
/// `delta = theta + l - 1` keeps that exponent equal to `sigma + k - 1`
/// independent of `l`, which is the family the solver monitors.
#[derive(Debug, Clone, Copy)]
pub struct NormSpec {
    pub space: SpaceParams,
    pub l: usize,
    pub delta: f64,
    pub p: f64,
}

impl NormSpec {
    pub fn new(space: SpaceParams, l: usize, delta: f64, p: f64) -> NormSpec {
        NormSpec { space, l, delta, p }
    }

    /// The pairing `delta = theta + l - 1` used by the flow displacement.
    pub fn displacement(space: SpaceParams, l: usize) -> NormSpec {
        NormSpec { space, l, delta: space.theta + l as f64 - 1.0, p: space.p }
    }

    /// The pairing `delta = theta + l` used for velocity-level fields.
    pub fn velocity(space: SpaceParams, l: usize) -> NormSpec {
        NormSpec { space, l, delta: space.theta + l as f64, p: space.p }
    }

    /// Weight exponent applied to the k-th derivative term.
    pub fn exponent(&self, k: usize) -> f64 {
        self.delta - self.l as f64 + k as f64 - self.space.d as f64 / self.p
    }
}

/// Per-order breakdown of a weighted Sobolev norm.
#[derive(Debug, Clone, Serialize)]
pub struct NormReport {
    /// Weighted L_p contribution of each derivative order `k = 0..=l`.
    pub per_order: Vec<f64>,
    /// Sum of the per-order terms.
    pub total: f64,
    /// Weighted sup-norms `w^{sigma + k - 1} |D^k f|_inf` for `k = 0..=l`.
    pub sup_norms: Vec<f64>,
}

/// All multi-indices of total order `k` in `d` axes.
pub fn multi_indices(d: usize, k: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    match d {
        2 => {
            for a in 0..=k {
                out.push([k - a, a, 0]);
            }
        }
        3 => {
            for a in 0..=k {
                for b in 0..=(k - a) {
                    out.push([k - a - b, a, b]);
                }
            }
        }
        _ => panic!("unsupported dimension {d}"),
    }
    out
}

/// `(sum_x sum_c w(x)^{p e} |f_c(x)|^p h^d)^{1/p}`.
pub fn weighted_lp_norm(f: &Field, exponent: f64, p: f64) -> f64 {
    let grid = f.grid;
    let np = grid.point_count();
    let hd = grid.cell_volume();
    let mut terms = vec![0.0f64; np];
    for (flat, term) in terms.iter_mut().enumerate() {
        let x = grid.point(flat);
        let w = weight(&x[..grid.d]).powf(p * exponent);
        let mut s = 0.0;
        for c in 0..f.component_count() {
            s += f.component(c)[flat].abs().powf(p);
        }
        *term = w * s * hd;
    }
    pairwise_sum(&terms).powf(1.0 / p)
}

/// `max_x w(x)^e max_c |f_c(x)|`.
pub fn weighted_sup_norm(f: &Field, exponent: f64) -> f64 {
    let grid = f.grid;
    let mut worst = 0.0f64;
    for flat in 0..grid.point_count() {
        let x = grid.point(flat);
        let w = weight(&x[..grid.d]).powf(exponent);
        for c in 0..f.component_count() {
            worst = worst.max(w * f.component(c)[flat].abs());
        }
    }
    worst
}

/// Stack of all derivatives `D^gamma f` of order `k`, gathered into one
/// multi-component field per order.
fn derivative_order_stack(f: &Field, k: usize) -> Result<Vec<Field>, FieldError> {
    multi_indices(f.grid.d, k).iter().map(|gamma| f.derivative(gamma)).collect()
}

/// Weighted L_p norm over the full order-k derivative stack.
fn order_term(f: &Field, k: usize, exponent: f64, p: f64) -> Result<f64, FieldError> {
    let stack = derivative_order_stack(f, k)?;
    let mut acc = 0.0;
    for df in &stack {
        acc += weighted_lp_norm(df, exponent, p).powf(p);
    }
    Ok(acc.powf(1.0 / p))
}

/// Full weighted Sobolev norm with per-order breakdown and the matching
/// weighted sup-norm table.
pub fn sobolev_norm(f: &Field, spec: &NormSpec) -> Result<NormReport, FieldError> {
    let sigma = spec.space.sigma();
    let mut per_order = Vec::with_capacity(spec.l + 1);
    let mut sup_norms = Vec::with_capacity(spec.l + 1);
    for k in 0..=spec.l {
        per_order.push(order_term(f, k, spec.exponent(k), spec.p)?);
        let stack = derivative_order_stack(f, k)?;
        let mut sup = 0.0f64;
        for df in &stack {
            sup = sup.max(weighted_sup_norm(df, sigma + k as f64 - 1.0));
        }
        sup_norms.push(sup);
    }
    let total = per_order.iter().sum();
    Ok(NormReport { per_order, total, sup_norms })
}

/// Outcome of one product-inequality measurement.
#[derive(Debug, Clone, Serialize)]
pub struct RingReport {
    /// `|uv| / (|u| |v|)` in the `H^l_{delta + l, p}` pairing.
    pub ratio: f64,
    /// Set when either factor norm is below the division guard.
    pub degenerate: bool,
}

const RING_GUARD: f64 = 1e-14;

/// Empirical product constant: `|uv|_{H^l_{delta+l,p}} / (|u| |v|)` with
/// both factors measured in the same space. Requires `delta >= d/p`.
pub fn ring_check(u: &Field, v: &Field, spec: &NormSpec) -> Result<RingReport, FieldError> {
    let nu = sobolev_norm(u, spec)?.total;
    let nv = sobolev_norm(v, spec)?.total;
    if nu < RING_GUARD || nv < RING_GUARD {
        return Ok(RingReport { ratio: 0.0, degenerate: true });
    }
    let grid = u.grid;
    assert_eq!(u.rank, crate::fields::Rank::Scalar);
    assert_eq!(v.rank, crate::fields::Rank::Scalar);
    let mut prod = Field::zeros(grid, crate::fields::Rank::Scalar);
    for (pv, (a, b)) in prod
        .values_mut()
        .iter_mut()
        .zip(u.component(0).iter().zip(v.component(0).iter()))
    {
        *pv = a * b;
    }
    let np = sobolev_norm(&prod, spec)?.total;
    Ok(RingReport { ratio: np / (nu * nv), degenerate: false })
}

/// Worst sampled Muckenhoupt product for `w^alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct ApReport {
    pub worst: f64,
    pub samples: usize,
}

/// Max over sampled `(x, R)` of
/// `(avg_{B_R(x)} w^alpha) (avg_{B_R(x)} w^{-alpha q / p})^{p/q}`,
/// with `1/p + 1/q = 1`. Centers are drawn from `[-half_width, half_width]^d`
/// and radii log-uniformly from `[0.1, 10]`; ball averages use a midpoint
/// lattice restricted to the ball. Finite for `alpha` in `(-d, d(p-1))`.
pub fn ap_check(
    d: usize,
    half_width: f64,
    alpha: f64,
    p: f64,
    samples: usize,
) -> Result<ApReport, FieldError> {
    if samples < 10 {
        return Err(FieldError::InvalidSpace(format!(
            "ap_check needs at least 10 samples, got {samples}"
        )));
    }
    let q = p / (p - 1.0);
    let mut rng = ChaCha12Rng::seed_from_u64(0x00A9_C4EC);
    let lattice = 20usize;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut x = [0.0f64; 3];
        for xa in x.iter_mut().take(d) {
            *xa = rng.gen_range(-half_width..half_width);
        }
        let radius = 0.1 * (10.0f64 / 0.1).powf(rng.gen::<f64>());
        let (mut pos_sum, mut neg_sum, mut count) = (0.0, 0.0, 0usize);
        let step = 2.0 * radius / lattice as f64;
        let mut idx = [0usize; 3];
        loop {
            let mut y = [0.0f64; 3];
            let mut r2 = 0.0;
            for a in 0..d {
                y[a] = -radius + (idx[a] as f64 + 0.5) * step;
                r2 += y[a] * y[a];
            }
            if r2 <= radius * radius {
                let mut p2 = [0.0f64; 3];
                for a in 0..d {
                    p2[a] = x[a] + y[a];
                }
                let w = weight(&p2[..d]);
                pos_sum += w.powf(alpha);
                neg_sum += w.powf(-alpha * q / p);
                count += 1;
            }
            // Odometer over the lattice.
            let mut axis = d;
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < lattice {
                    axis = a;
                    break;
                }
                idx[a] = 0;
            }
            if axis == d {
                break;
            }
        }
        let c = count as f64;
        let product = (pos_sum / c) * (neg_sum / c).powf(p / q);
        worst = worst.max(product);
    }
    Ok(ApReport { worst, samples })
}
