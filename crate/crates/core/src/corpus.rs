//! Fixed-seed families of smooth decaying test fields: Gaussians modulated
//! by low-degree polynomials, with randomized centers and widths. Widths are
//! kept at or above `4h` so every member is resolvable on its grid.

use crate::fields::{Field, GridSpec};
use crate::linalg::Vec3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One corpus member in closed form, so tests can evaluate exact values and
/// derivatives independently of any grid.
#[derive(Debug, Clone)]
pub struct GaussianBump {
    pub center: Vec3,
    pub width: f64,
    pub amplitude: f64,
    /// Linear modulation coefficients: value is
    /// `amplitude * (1 + sum_a lin[a] * (x - center)_a) * exp(-|x - center|^2 / (2 width^2))`.
    pub lin: Vec3,
}

impl GaussianBump {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let d = x.len().min(3);
        let mut r2 = 0.0;
        let mut poly = 1.0;
        for a in 0..d {
            let dx = x[a] - self.center[a];
            r2 += dx * dx;
            poly += self.lin[a] * dx;
        }
        self.amplitude * poly * (-r2 / (2.0 * self.width * self.width)).exp()
    }

    pub fn as_field(&self, grid: GridSpec) -> Field {
        Field::from_fn_scalar(grid, |x| self.eval(&x[..grid.d]))
    }
}

/// Deterministic family of scalar bumps for a given grid and seed.
pub fn scalar_corpus(grid: GridSpec, count: usize, seed: u64) -> Vec<GaussianBump> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let min_width = 4.0 * grid.h();
    let max_width = (grid.half_width / 4.0).max(min_width * 1.5);
    for _ in 0..count {
        let mut center = [0.0; 3];
        let mut lin = [0.0; 3];
        for a in 0..grid.d {
            center[a] = rng.gen_range(-grid.half_width / 3.0..grid.half_width / 3.0);
            lin[a] = rng.gen_range(-0.5..0.5);
        }
        out.push(GaussianBump {
            center,
            width: rng.gen_range(min_width..max_width),
            amplitude: rng.gen_range(0.5..2.0),
            lin,
        });
    }
    out
}

/// Decaying vector fields: each component is an independent bump.
pub fn vector_corpus(grid: GridSpec, count: usize, seed: u64) -> Vec<Field> {
    (0..count)
        .map(|k| {
            let comps = scalar_corpus(grid, grid.d, seed ^ (0x5bd1e995u64).wrapping_mul(k as u64 + 1));
            Field::from_fn_vector(grid, |x| {
                let mut v = [0.0; 3];
                for (a, b) in comps.iter().enumerate() {
                    v[a] = b.eval(&x[..grid.d]);
                }
                v
            })
        })
        .collect()
}

/// Divergence-free 2-d fields built from Gaussian stream bumps:
/// `u = (d_2 psi, -d_1 psi)`, evaluated analytically.
pub fn solenoidal_corpus_2d(grid: GridSpec, count: usize, seed: u64) -> Vec<Field> {
    assert_eq!(grid.d, 2);
    let bumps = scalar_corpus(grid, count, seed);
    bumps
        .iter()
        .map(|b| {
            Field::from_fn_vector(grid, |x| {
                let g = stream_gradient(b, x);
                [g[1], -g[0], 0.0]
            })
        })
        .collect()
}

/// Analytic gradient of a bump, used where a discrete derivative would
/// contaminate an oracle.
pub fn stream_gradient(b: &GaussianBump, x: &Vec3) -> Vec3 {
    let mut r2 = 0.0;
    let mut poly = 1.0;
    let mut dx = [0.0; 3];
    for a in 0..3 {
        dx[a] = x[a] - b.center[a];
        r2 += dx[a] * dx[a];
        poly += b.lin[a] * dx[a];
    }
    let s2 = b.width * b.width;
    let e = (-r2 / (2.0 * s2)).exp();
    let mut g = [0.0; 3];
    for a in 0..3 {
        g[a] = b.amplitude * e * (b.lin[a] - poly * dx[a] / s2);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let grid = GridSpec::new(2, 6.0, 32).unwrap();
        let a = scalar_corpus(grid, 5, 7);
        let b = scalar_corpus(grid, 5, 7);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.eval(&[0.3, -0.2]), y.eval(&[0.3, -0.2]));
        }
    }

    #[test]
    fn widths_are_resolvable() {
        let grid = GridSpec::new(2, 6.0, 32).unwrap();
        for b in scalar_corpus(grid, 20, 3) {
            assert!(b.width >= 4.0 * grid.h());
        }
    }

    #[test]
    fn stream_gradient_matches_finite_difference() {
        let grid = GridSpec::new(2, 6.0, 96).unwrap();
        let b = &scalar_corpus(grid, 1, 11)[0];
        let f = b.as_field(grid);
        let dfx = f.derivative(&[1, 0, 0]).unwrap();
        let mut worst = 0.0f64;
        for (flat, idx) in grid.index_iter() {
            if !grid.is_interior(&idx, 2) {
                continue;
            }
            let x = grid.point(flat);
            let g = stream_gradient(b, &x);
            worst = worst.max((dfx.component(0)[flat] - g[0]).abs());
        }
        assert!(worst < 5.0 * grid.h() * grid.h(), "worst = {worst}");
    }

    #[test]
    fn solenoidal_corpus_is_divergence_free() {
        let grid = GridSpec::new(2, 6.0, 64).unwrap();
        for u in solenoidal_corpus_2d(grid, 3, 5) {
            let div = u.divergence().unwrap();
            let jac = u.jacobian().unwrap();
            assert!(div.max_abs() <= 0.05 * jac.max_abs());
        }
    }
}
