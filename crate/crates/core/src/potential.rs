//! Newtonian potential, its gradient kernels, and the gradient/solenoidal
//! decomposition of vector fields, each with two independent routes: direct
//! kernel quadrature over the box, and a periodic spectral path used as a
//! cross-check and as the fast route inside the solver loop.

mod spectral;

use crate::fields::{Field, FieldError, GridSpec, Rank, SpaceParams};
use crate::sobolev::{sobolev_norm, NormSpec};
use rayon::prelude::*;
use serde::Serialize;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

pub use spectral::SpectralEngine;

/// Offsets out to which kernel cell averages are integrated exactly
/// instead of sampled at the cell center.
const NEAR_FIELD_CELLS: isize = 2;
/// Simpson panels per axis for the near-field cell integrals.
const NEAR_FIELD_PANELS: usize = 32;

/// Volume of the unit ball in dimension d.
fn unit_ball_volume(d: usize) -> f64 {
    match d {
        2 => std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI / 3.0,
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Fundamental solution of the Laplacian.
fn gamma_kernel(d: usize, r: f64) -> f64 {
    match d {
        2 => r.ln() / (2.0 * std::f64::consts::PI),
        3 => -1.0 / (4.0 * std::f64::consts::PI * r),
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Gradient components of the fundamental solution: `z_i |z|^{-d} / (d w_d)`.
fn gamma_grad(d: usize, z: &[f64; 3], axis: usize) -> f64 {
    let mut r2 = 0.0;
    for za in z.iter().take(d) {
        r2 += za * za;
    }
    let r = r2.sqrt();
    z[axis] * r.powi(-(d as i32)) / (d as f64 * unit_ball_volume(d))
}

/// Precomputed cell-averaged kernel values on the offset lattice
/// `[-(n-1), n-1]^d`. `newton` holds averages of the fundamental solution,
/// `grad[i]` of its i-th gradient component. The gradient tables are exactly
/// antisymmetric by construction: mirrored offsets are stored as negations.
pub struct KernelTable {
    pub grid: GridSpec,
    pub newton: Vec<f64>,
    pub grad: Vec<Vec<f64>>,
    pub side: usize,
}

impl KernelTable {
    pub fn build(grid: GridSpec) -> KernelTable {
        let d = grid.d;
        let n = grid.n as isize;
        let side = (2 * n - 1) as usize;
        let table_len = side.pow(d as u32);
        let h = grid.h();

        let offset_of_flat = |flat: usize| -> [isize; 3] {
            let mut out = [0isize; 3];
            let mut rem = flat;
            for axis in (0..d).rev() {
                out[axis] = (rem % side) as isize - (n - 1);
                rem /= side;
            }
            out
        };
        let flat_of_offset = |off: &[isize; 3]| -> usize {
            let mut f = 0usize;
            for &o in off.iter().take(d) {
                f = f * side + (o + n - 1) as usize;
            }
            f
        };

        let mut newton = vec![0.0; table_len];
        let mut grad = vec![vec![0.0; table_len]; d];

        for flat in 0..table_len {
            let off = offset_of_flat(flat);
            let near = off.iter().take(d).all(|o| o.abs() <= NEAR_FIELD_CELLS);
            let is_self = off.iter().take(d).all(|o| *o == 0);
            // Canonical representative: first nonzero offset component is
            // positive. Mirrors are filled by negation below.
            let first_nonzero = off.iter().take(d).find(|o| **o != 0).copied().unwrap_or(0);

            if is_self {
                newton[flat] = self_cell_average(d, h);
                // grad stays 0: odd kernel over a symmetric cell.
                continue;
            }
            if first_nonzero < 0 {
                continue;
            }
            let center = [off[0] as f64 * h, off[1] as f64 * h, off[2] as f64 * h];
            if near {
                newton[flat] = cell_average(d, h, &center, |z| {
                    let mut r2 = 0.0;
                    for za in z.iter().take(d) {
                        r2 += za * za;
                    }
                    gamma_kernel(d, r2.sqrt())
                });
                for (axis, g) in grad.iter_mut().enumerate() {
                    g[flat] = cell_average(d, h, &center, |z| gamma_grad(d, z, axis));
                }
            } else {
                let mut r2 = 0.0;
                for ca in center.iter().take(d) {
                    r2 += ca * ca;
                }
                newton[flat] = gamma_kernel(d, r2.sqrt());
                for (axis, g) in grad.iter_mut().enumerate() {
                    g[flat] = gamma_grad(d, &center, axis);
                }
            }
        }
        // Mirror pass: Gamma is even, Gamma_i odd.
        for flat in 0..table_len {
            let off = offset_of_flat(flat);
            let first_nonzero = off.iter().take(d).find(|o| **o != 0).copied().unwrap_or(0);
            if first_nonzero >= 0 {
                continue;
            }
            let mirror = [-off[0], -off[1], -off[2]];
            let src = flat_of_offset(&mirror);
            newton[flat] = newton[src];
            for g in grad.iter_mut() {
                g[flat] = -g[src];
            }
        }
        KernelTable { grid, newton, grad, side }
    }

    /// Cache file name keyed by the grid.
    pub fn cache_path(dir: &Path, grid: GridSpec) -> PathBuf {
        dir.join(format!("kernel-d{}-n{}-L{}.ktb", grid.d, grid.n, grid.half_width))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, FieldError> {
        std::fs::create_dir_all(dir)?;
        let path = Self::cache_path(dir, self.grid);
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        file.write_all(b"KTB1")?;
        file.write_all(&(self.grid.d as u32).to_le_bytes())?;
        file.write_all(&(self.grid.n as u32).to_le_bytes())?;
        file.write_all(&self.grid.half_width.to_le_bytes())?;
        for v in &self.newton {
            file.write_all(&v.to_le_bytes())?;
        }
        for g in &self.grad {
            for v in g {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(path)
    }

    pub fn load(dir: &Path, grid: GridSpec) -> Result<KernelTable, FieldError> {
        let path = Self::cache_path(dir, grid);
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != b"KTB1" {
            return Err(FieldError::BadDump("bad kernel cache magic".into()));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        file.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        let mut f64buf = [0u8; 8];
        file.read_exact(&mut f64buf)?;
        let half_width = f64::from_le_bytes(f64buf);
        if d != grid.d || n != grid.n || half_width != grid.half_width {
            return Err(FieldError::BadDump("kernel cache key mismatch".into()));
        }
        let side = 2 * n - 1;
        let table_len = side.pow(d as u32);
        let mut read_table = |len: usize| -> Result<Vec<f64>, FieldError> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                file.read_exact(&mut f64buf)?;
                out.push(f64::from_le_bytes(f64buf));
            }
            Ok(out)
        };
        let newton = read_table(table_len)?;
        let mut grad = Vec::with_capacity(d);
        for _ in 0..d {
            grad.push(read_table(table_len)?);
        }
        Ok(KernelTable { grid, newton, grad, side })
    }
}

/// Average of the fundamental solution over the singular cell, taken as the
/// exact integral over the disk/ball of volume `h^d` centered at the
/// singularity. Keeps O(h^2) consistency while the gradient tables stay
/// exactly antisymmetric.
fn self_cell_average(d: usize, h: f64) -> f64 {
    match d {
        2 => {
            let r0 = h / std::f64::consts::PI.sqrt();
            (r0 * r0 * (r0.ln() / 2.0 - 0.25)) / (h * h)
        }
        3 => {
            let r0 = (3.0 / (4.0 * std::f64::consts::PI)).cbrt() * h;
            -(r0 * r0 / 2.0) / (h * h * h)
        }
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Average of `f` over the cell of side `h` centered at `center`, by tensor
/// Simpson quadrature.
fn cell_average(d: usize, h: f64, center: &[f64; 3], f: impl Fn(&[f64; 3]) -> f64) -> f64 {
    let m = NEAR_FIELD_PANELS;
    let step = h / m as f64;
    let w1 = |i: usize| -> f64 {
        if i == 0 || i == m {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut acc = 0.0;
    let mut idx = [0usize; 3];
    loop {
        let mut z = [0.0f64; 3];
        let mut w = 1.0;
        for a in 0..d {
            z[a] = center[a] - h / 2.0 + idx[a] as f64 * step;
            w *= w1(idx[a]);
        }
        acc += w * f(&z);
        let mut axis = d;
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] <= m {
                axis = a;
                break;
            }
            idx[a] = 0;
        }
        if axis == d {
            break;
        }
    }
    acc * (step / 3.0).powi(d as i32) / h.powi(d as i32)
}

/// Direct convolution `out(x) = h^d sum_y table(x - y) f(y)` of one scalar
/// component against one kernel table component.
fn convolve(table: &[f64], side: usize, f: &Field) -> Field {
    let grid = f.grid;
    assert_eq!(f.rank, Rank::Scalar);
    let n = grid.n;
    let hd = grid.cell_volume();
    let src = f.component(0);
    let mut out = Field::zeros(grid, Rank::Scalar);
    match grid.d {
        2 => {
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i0| {
                    let mut row = vec![0.0; n];
                    for (i1, slot) in row.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for j0 in 0..n {
                            let t_row = (i0 + n - 1 - j0) * side + (i1 + n - 1);
                            let f_row = j0 * n;
                            for j1 in 0..n {
                                acc += table[t_row - j1] * src[f_row + j1];
                            }
                        }
                        *slot = acc * hd;
                    }
                    row
                })
                .collect();
            let dst = out.component_mut(0);
            for (i0, row) in rows.into_iter().enumerate() {
                dst[i0 * n..(i0 + 1) * n].copy_from_slice(&row);
            }
        }
        3 => {
            let planes: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i0| {
                    let mut plane = vec![0.0; n * n];
                    for i1 in 0..n {
                        for i2 in 0..n {
                            let mut acc = 0.0;
                            for j0 in 0..n {
                                let t0 = (i0 + n - 1 - j0) * side;
                                for j1 in 0..n {
                                    let t01 = (t0 + i1 + n - 1 - j1) * side + (i2 + n - 1);
                                    let f_row = (j0 * n + j1) * n;
                                    for j2 in 0..n {
                                        acc += table[t01 - j2] * src[f_row + j2];
                                    }
                                }
                            }
                            plane[i1 * n + i2] = acc * hd;
                        }
                    }
                    plane
                })
                .collect();
            let dst = out.component_mut(0);
            for (i0, plane) in planes.into_iter().enumerate() {
                dst[i0 * n * n..(i0 + 1) * n * n].copy_from_slice(&plane);
            }
        }
        _ => panic!("unsupported dimension"),
    }
    out
}

/// Which route evaluates the singular-integral operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProjectionMethod {
    Quadrature,
    Spectral,
}

/// Gradient/solenoidal split of a vector field; the parts sum back to the
/// input exactly because the solenoidal part is defined as the remainder.
pub struct ProjectionPair {
    pub gradient_part: Field,
    pub solenoidal_part: Field,
}

/// Shared entry point for potential-theoretic operators on one grid. The
/// kernel table and the spectral plan are built once on first use and are
/// read-only afterwards, so the operator can be shared across threads.
pub struct PotentialOperator {
    pub grid: GridSpec,
    table: OnceLock<KernelTable>,
    engine: OnceLock<SpectralEngine>,
}

impl PotentialOperator {
    pub fn new(grid: GridSpec) -> PotentialOperator {
        PotentialOperator { grid, table: OnceLock::new(), engine: OnceLock::new() }
    }

    pub fn kernel_table(&self) -> &KernelTable {
        self.table.get_or_init(|| KernelTable::build(self.grid))
    }

    /// Install a previously cached table (must match the grid).
    pub fn with_table(grid: GridSpec, table: KernelTable) -> PotentialOperator {
        assert_eq!(table.grid, grid);
        let op = PotentialOperator::new(grid);
        let _ = op.table.set(table);
        op
    }

    pub fn engine(&self) -> &SpectralEngine {
        self.engine.get_or_init(|| SpectralEngine::new(self.grid))
    }

    /// Newtonian potential by kernel quadrature. Decay is the caller's
    /// responsibility; `poor_decay` reports when the boundary samples are
    /// not negligible.
    pub fn newton_potential(&self, f: &Field) -> Field {
        let table = self.kernel_table();
        convolve(&table.newton, table.side, f)
    }

    /// `T_i f`: convolution against the i-th gradient kernel.
    pub fn t_op(&self, f: &Field, axis: usize) -> Field {
        let table = self.kernel_table();
        convolve(&table.grad[axis], table.side, f)
    }

    pub fn t_op_spectral(&self, f: &Field, axis: usize) -> Field {
        self.engine().t_op(f, axis)
    }

    /// Gradient projection `G(v) = T_i grad(v^i)` (quadrature) or the Riesz
    /// multiplier form (spectral); `S(v) = v - G(v)`.
    pub fn project(&self, v: &Field, method: ProjectionMethod) -> Result<ProjectionPair, FieldError> {
        assert_eq!(v.rank, Rank::Vector);
        let gradient_part = match method {
            ProjectionMethod::Spectral => self.engine().gradient_projection(v),
            ProjectionMethod::Quadrature => {
                let d = self.grid.d;
                let mut g = Field::zeros(self.grid, Rank::Vector);
                for i in 0..d {
                    let grad_vi = v.component_field(i).gradient()?;
                    for a in 0..d {
                        let ti = self.t_op(&grad_vi.component_field(a), i);
                        let dst = g.component_mut(a);
                        for (slot, val) in dst.iter_mut().zip(ti.component(0)) {
                            *slot += val;
                        }
                    }
                }
                g
            }
        };
        let solenoidal_part = v.minus(&gradient_part);
        Ok(ProjectionPair { gradient_part, solenoidal_part })
    }

    /// `K^j = sum_i T_i[A_{ji}]` for an antisymmetric matrix field.
    pub fn kernel_contraction(&self, a: &Field, method: ProjectionMethod) -> Field {
        assert_eq!(a.rank, Rank::Matrix);
        match method {
            ProjectionMethod::Spectral => self.engine().kernel_contraction(a),
            ProjectionMethod::Quadrature => {
                let d = self.grid.d;
                let mut out = Field::zeros(self.grid, Rank::Vector);
                for j in 0..d {
                    for i in 0..d {
                        if i == j {
                            continue;
                        }
                        let ti = self.t_op(&a.component_field(j * d + i), i);
                        let dst = out.component_mut(j);
                        for (slot, val) in dst.iter_mut().zip(ti.component(0)) {
                            *slot += val;
                        }
                    }
                }
                out
            }
        }
    }
}

/// True when the boundary samples are not negligible against the field
/// maximum, i.e. the decay precondition of the potential operators fails.
pub fn poor_decay(f: &Field) -> bool {
    let grid = f.grid;
    let max = f.max_abs();
    if max == 0.0 {
        return false;
    }
    let mut boundary_max = 0.0f64;
    for (flat, idx) in grid.index_iter() {
        if grid.is_interior(&idx, 1) {
            continue;
        }
        for c in 0..f.component_count() {
            boundary_max = boundary_max.max(f.component(c)[flat].abs());
        }
    }
    boundary_max > 1e-6 * max
}

/// One corpus member's operator-norm surrogate.
#[derive(Debug, Clone, Serialize)]
pub struct BoundednessReport {
    /// Per-member ratios `|T_i f| / |f|` (max over i), ascending.
    pub ratios: Vec<f64>,
    pub skipped: usize,
    pub max: f64,
    pub median: f64,
}

/// Ratios `|T_i f|_{H^{l+1}_{theta+l,p}} / |f|_{H^l_{theta+l,p}}` over a
/// corpus of decaying scalar fields.
pub fn boundedness_probe(
    op: &PotentialOperator,
    corpus: &[Field],
    space: &SpaceParams,
    l: usize,
) -> Result<BoundednessReport, FieldError> {
    let delta = space.theta + l as f64;
    let num_spec = NormSpec::new(*space, l + 1, delta, space.p);
    let den_spec = NormSpec::new(*space, l, delta, space.p);
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for f in corpus {
        let den = sobolev_norm(f, &den_spec)?.total;
        if den < 1e-14 {
            skipped += 1;
            continue;
        }
        let mut worst = 0.0f64;
        for axis in 0..op.grid.d {
            let tf = op.t_op(f, axis);
            let num = sobolev_norm(&tf, &num_spec)?.total;
            worst = worst.max(num / den);
        }
        ratios.push(worst);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let max = ratios.last().copied().unwrap_or(0.0);
    let median = if ratios.is_empty() { 0.0 } else { ratios[ratios.len() / 2] };
    Ok(BoundednessReport { ratios, skipped, max, median })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{scalar_corpus, solenoidal_corpus_2d, vector_corpus};
    use crate::fields::weight;
    use crate::linalg::pairwise_sum;
    use statrs::function::erf::erf;

    fn grid2(n: usize) -> GridSpec {
        GridSpec::new(2, 6.0, n).unwrap()
    }

    #[test]
    fn gradient_table_is_bitwise_antisymmetric() {
        let grid = grid2(16);
        let t = KernelTable::build(grid);
        let n = grid.n as isize;
        let side = t.side as isize;
        for axis in 0..2 {
            for o0 in -(n - 1)..n {
                for o1 in -(n - 1)..n {
                    let f = ((o0 + n - 1) * side + (o1 + n - 1)) as usize;
                    let m = ((-o0 + n - 1) * side + (-o1 + n - 1)) as usize;
                    let a = t.grad[axis][f];
                    let b = t.grad[axis][m];
                    assert!(
                        (a == -b) || (a == 0.0 && b == 0.0),
                        "offset ({o0},{o1}) axis {axis}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn newton_of_zero_is_zero_and_linear() {
        let grid = grid2(24);
        let op = PotentialOperator::new(grid);
        let z = Field::zeros(grid, Rank::Scalar);
        assert_eq!(op.newton_potential(&z).max_abs(), 0.0);

        let bumps = scalar_corpus(grid, 2, 9);
        let f = bumps[0].as_field(grid);
        let g = bumps[1].as_field(grid);
        let mut comb = f.scaled(2.0);
        comb.add_scaled(&g, -0.7);
        let lhs = op.newton_potential(&comb);
        let mut rhs = op.newton_potential(&f).scaled(2.0);
        rhs.add_scaled(&op.newton_potential(&g), -0.7);
        let scale = lhs.max_abs().max(1e-30);
        assert!(lhs.minus(&rhs).max_abs() < 1e-11 * scale);
    }

    #[test]
    fn newton_gaussian_3d_matches_closed_form() {
        // Potential of exp(-r^2/2): psi(r) = -M erf(r / sqrt(2)) / (4 pi r),
        // M = (2 pi)^{3/2}.
        let grid = GridSpec::new(3, 5.0, 28).unwrap();
        let op = PotentialOperator::new(grid);
        let f = Field::from_fn_scalar(grid, |x| {
            (-(x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 2.0).exp()
        });
        let psi = op.newton_potential(&f);
        let mass = (2.0 * std::f64::consts::PI).powf(1.5);
        let exact = |r: f64| -> f64 {
            if r < 1e-9 {
                -mass * (2.0 / std::f64::consts::PI).sqrt() / (4.0 * std::f64::consts::PI)
            } else {
                -mass * erf(r / 2.0f64.sqrt()) / (4.0 * std::f64::consts::PI * r)
            }
        };
        let scale = exact(0.0).abs();
        let mut worst = 0.0f64;
        for (flat, idx) in grid.index_iter() {
            if !grid.is_interior(&idx, 2) {
                continue;
            }
            let x = grid.point(flat);
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            worst = worst.max((psi.component(0)[flat] - exact(r)).abs());
        }
        assert!(worst <= 0.01 * scale, "worst abs err {worst} vs scale {scale}");
    }

    #[test]
    fn laplacian_inverts_newton_potential() {
        let grid = grid2(48);
        let op = PotentialOperator::new(grid);
        let b = &scalar_corpus(grid, 1, 13)[0];
        let f = b.as_field(grid);
        let psi = op.newton_potential(&f);
        let lap = psi.laplacian();
        let mut worst = 0.0f64;
        for (flat, idx) in grid.index_iter() {
            if !grid.is_interior(&idx, 3) {
                continue;
            }
            worst = worst.max((lap.component(0)[flat] - f.component(0)[flat]).abs());
        }
        let h = grid.h();
        assert!(
            worst <= 5.0 * h * h * f.max_abs(),
            "worst {worst} vs budget {}",
            5.0 * h * h * f.max_abs()
        );
    }

    #[test]
    fn t_op_of_even_field_is_odd() {
        let grid = grid2(32);
        let op = PotentialOperator::new(grid);
        let f = Field::from_fn_scalar(grid, |x| (-(x[0] * x[0] + x[1] * x[1])).exp());
        let t0 = op.t_op(&f, 0);
        let n = grid.n;
        let scale = t0.max_abs();
        let mut worst = 0.0f64;
        for i0 in 0..n {
            for i1 in 0..n {
                let a = t0.component(0)[i0 * n + i1];
                let b = t0.component(0)[(n - 1 - i0) * n + (n - 1 - i1)];
                worst = worst.max((a + b).abs());
            }
        }
        assert!(worst <= 1e-10 * scale, "symmetric residue {worst} vs scale {scale}");
    }

    #[test]
    fn t_op_matches_gradient_of_newton_potential() {
        let grid = grid2(64);
        let op = PotentialOperator::new(grid);
        let f = Field::from_fn_scalar(grid, |x| {
            (-(x[0] * x[0] + x[1] * x[1]) / 1.5).exp() * (1.0 + 0.3 * x[0])
        });
        let t0 = op.t_op(&f, 0);
        let dn = op.newton_potential(&f).derivative(&[1, 0, 0]).unwrap();
        let scale = t0.max_abs();
        let mut worst = 0.0f64;
        for (flat, idx) in grid.index_iter() {
            if !grid.is_interior(&idx, 3) {
                continue;
            }
            worst = worst.max((t0.component(0)[flat] - dn.component(0)[flat]).abs());
        }
        assert!(worst <= 0.02 * scale, "cross-path gap {worst} vs scale {scale}");
    }

    #[test]
    fn projection_annihilates_pure_gradients() {
        let grid = grid2(48);
        let op = PotentialOperator::new(grid);
        let s2 = 1.44;
        let v = Field::from_fn_vector(grid, |x| {
            let e = (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * s2)).exp();
            [-x[0] / s2 * e, -x[1] / s2 * e, 0.0]
        });
        for method in [ProjectionMethod::Quadrature, ProjectionMethod::Spectral] {
            let pair = op.project(&v, method).unwrap();
            let s_sup = pair.solenoidal_part.max_abs();
            assert!(
                s_sup <= 0.01 * v.max_abs(),
                "{method:?}: |S(grad phi)| = {s_sup} vs input {}",
                v.max_abs()
            );
            // Exact reconstruction by construction.
            let sum = pair.gradient_part.plus(&pair.solenoidal_part);
            assert_eq!(sum, v);
        }
    }

    #[test]
    fn projection_preserves_stream_fields() {
        let grid = grid2(48);
        let op = PotentialOperator::new(grid);
        let v = &solenoidal_corpus_2d(grid, 1, 23)[0];
        for method in [ProjectionMethod::Quadrature, ProjectionMethod::Spectral] {
            let pair = op.project(v, method).unwrap();
            let gap = pair.solenoidal_part.minus(v).max_abs();
            assert!(gap <= 0.01 * v.max_abs(), "{method:?}: |S(v) - v| = {gap}");
        }
    }

    #[test]
    fn projection_methods_agree() {
        let grid = grid2(48);
        let op = PotentialOperator::new(grid);
        let v = &vector_corpus(grid, 1, 31)[0];
        let quad = op.project(v, ProjectionMethod::Quadrature).unwrap();
        let spec = op.project(v, ProjectionMethod::Spectral).unwrap();
        let mut worst = 0.0f64;
        for c in 0..2 {
            let a = quad.solenoidal_part.component(c);
            let b = spec.solenoidal_part.component(c);
            for (flat, idx) in grid.index_iter() {
                if !grid.is_interior(&idx, 3) {
                    continue;
                }
                worst = worst.max((a[flat] - b[flat]).abs());
            }
        }
        assert!(worst <= 0.02 * v.max_abs(), "method gap {worst}");
    }

    #[test]
    fn projection_is_idempotent() {
        let grid = grid2(48);
        let op = PotentialOperator::new(grid);
        let v = &vector_corpus(grid, 1, 37)[0];
        for method in [ProjectionMethod::Quadrature, ProjectionMethod::Spectral] {
            let s1 = op.project(v, method).unwrap().solenoidal_part;
            let s2 = op.project(&s1, method).unwrap().solenoidal_part;
            assert!(s2.minus(&s1).max_abs() <= 0.02 * v.max_abs(), "{method:?}");
            let g1 = op.project(v, method).unwrap().gradient_part;
            let g2 = op.project(&g1, method).unwrap().gradient_part;
            assert!(g2.minus(&g1).max_abs() <= 0.02 * v.max_abs(), "{method:?}");
        }
    }

    #[test]
    fn projections_are_orthogonal() {
        let grid = grid2(48);
        let op = PotentialOperator::new(grid);
        let fields = vector_corpus(grid, 4, 43);
        let hd = grid.cell_volume();
        let l2 = |f: &Field| -> f64 {
            let total: f64 = (0..f.component_count())
                .map(|c| pairwise_sum(&f.component(c).iter().map(|v| v * v).collect::<Vec<_>>()))
                .sum();
            (total * hd).sqrt()
        };
        for pair in fields.chunks(2) {
            let g = op.project(&pair[0], ProjectionMethod::Spectral).unwrap().gradient_part;
            let s = op.project(&pair[1], ProjectionMethod::Spectral).unwrap().solenoidal_part;
            let mut terms = vec![0.0; grid.point_count()];
            for c in 0..2 {
                for (t, (a, b)) in terms.iter_mut().zip(g.component(c).iter().zip(s.component(c))) {
                    *t += a * b;
                }
            }
            let inner = pairwise_sum(&terms).abs() * hd;
            assert!(inner <= 1e-3 * l2(&pair[0]) * l2(&pair[1]), "inner product {inner}");
        }
    }

    #[test]
    fn solenoidal_part_is_divergence_free() {
        let op64 = PotentialOperator::new(grid2(64));
        let op127 = PotentialOperator::new(grid2(127));
        let div_scale = |op: &PotentialOperator| -> (f64, f64) {
            let v = &vector_corpus(op.grid, 1, 47)[0];
            let s = op.project(v, ProjectionMethod::Spectral).unwrap().solenoidal_part;
            let mut div_sup = 0.0f64;
            let div = s.divergence().unwrap();
            for (flat, idx) in op.grid.index_iter() {
                if op.grid.is_interior(&idx, 3) {
                    div_sup = div_sup.max(div.component(0)[flat].abs());
                }
            }
            (div_sup, v.jacobian().unwrap().max_abs())
        };
        let (d64, j64) = div_scale(&op64);
        assert!(d64 <= 0.05 * j64, "div {d64} vs grad scale {j64}");
        let (d127, _) = div_scale(&op127);
        assert!(d127 <= 0.6 * d64, "no divergence decay under refinement: {d127} vs {d64}");
    }

    #[test]
    fn boundedness_probe_skips_zero_and_sorts() {
        let grid = grid2(32);
        let op = PotentialOperator::new(grid);
        let space = SpaceParams::new(2, 4.0, 4, 1.6, 0.0, 0.0).unwrap();
        let mut corpus: Vec<Field> =
            scalar_corpus(grid, 4, 51).iter().map(|b| b.as_field(grid)).collect();
        corpus.push(Field::zeros(grid, Rank::Scalar));
        let report = boundedness_probe(&op, &corpus, &space, 2).unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.ratios.len(), 4);
        assert!(report.ratios.windows(2).all(|w| w[0] <= w[1]));
        assert!(report.max.is_finite() && report.max > 0.0);
    }

    #[test]
    fn kernel_table_cache_round_trip() {
        let grid = grid2(12);
        let t = KernelTable::build(grid);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        let back = KernelTable::load(dir.path(), grid).unwrap();
        assert_eq!(t.newton, back.newton);
        assert_eq!(t.grad, back.grad);
    }

    #[test]
    fn poor_decay_flags_non_decaying_fields() {
        let grid = grid2(16);
        let flat = Field::from_fn_scalar(grid, |_| 1.0);
        assert!(poor_decay(&flat));
        let gauss = Field::from_fn_scalar(grid, |x| (-(x[0] * x[0] + x[1] * x[1]) * 2.0).exp());
        assert!(!poor_decay(&gauss));
        let _ = weight(&[0.0, 0.0]); // keep the import honest
    }
}
