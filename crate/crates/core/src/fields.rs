//! Uniform-grid discretization of scalar/vector/matrix fields on the
//! truncated box `[-L, L]^d`, the polynomial weight function, centered
//! finite differences and multilinear interpolation.
//!
//! Storage is contiguous row-major per component, component-outermost, so
//! convolution and reduction passes stream one component at a time. Fields
//! are immutable after construction as far as the operators are concerned;
//! everything here is a pure function over the sample values.

use crate::linalg::{Mat3, Vec3, ZERO_VEC};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Highest derivative order the finite-difference stencils are trusted for.
pub const STENCIL_BUDGET: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("derivative order {requested} exceeds the stencil budget {budget}")]
    OrderTooHigh { requested: usize, budget: usize },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid space parameters: {0}")]
    InvalidSpace(String),
    #[error("field i/o: {0}")]
    Io(String),
    #[error("malformed field dump: {0}")]
    BadDump(String),
}

impl From<io::Error> for FieldError {
    fn from(e: io::Error) -> Self {
        FieldError::Io(e.to_string())
    }
}

/// Uniform grid over `[-L, L]^d` with `n` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub d: usize,
    /// Half-width of the box.
    pub half_width: f64,
    /// Points per axis, endpoints included.
    pub n: usize,
}

impl GridSpec {
    pub fn new(d: usize, half_width: f64, n: usize) -> Result<Self, FieldError> {
        if d != 2 && d != 3 {
            return Err(FieldError::InvalidGrid(format!("d must be 2 or 3, got {d}")));
        }
        if n < 8 {
            return Err(FieldError::InvalidGrid(format!("n must be >= 8, got {n}")));
        }
        if !(half_width > 0.0) {
            return Err(FieldError::InvalidGrid(format!(
                "half-width must be positive, got {half_width}"
            )));
        }
        Ok(GridSpec { d, half_width, n })
    }

    /// Grid spacing `2L / (n - 1)`.
    pub fn h(&self) -> f64 {
        2.0 * self.half_width / (self.n - 1) as f64
    }

    /// Cell volume `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    /// Total number of grid points.
    pub fn point_count(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Coordinate of node `i` along one axis.
    pub fn coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.h()
    }

    /// Node coordinates from a flat row-major index.
    pub fn point(&self, flat: usize) -> Vec3 {
        let mut out = ZERO_VEC;
        let mut rem = flat;
        for axis in (0..self.d).rev() {
            out[axis] = self.coord(rem % self.n);
            rem /= self.n;
        }
        out
    }

    /// Flat row-major index from per-axis node indices.
    pub fn flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for &i in idx.iter().take(self.d) {
            f = f * self.n + i;
        }
        f
    }

    /// Iterate flat index and per-axis indices together.
    pub fn index_iter(&self) -> GridIndexIter {
        GridIndexIter { grid: *self, flat: 0, idx: [0; 3] }
    }

    /// True when every per-axis index is at least `margin` cells away from
    /// the boundary.
    pub fn is_interior(&self, idx: &[usize; 3], margin: usize) -> bool {
        (0..self.d).all(|a| idx[a] >= margin && idx[a] + margin < self.n)
    }
}

pub struct GridIndexIter {
    grid: GridSpec,
    flat: usize,
    idx: [usize; 3],
}

impl Iterator for GridIndexIter {
    type Item = (usize, [usize; 3]);

    fn next(&mut self) -> Option<Self::Item> {
        if self.flat >= self.grid.point_count() {
            return None;
        }
        let item = (self.flat, self.idx);
        self.flat += 1;
        for axis in (0..self.grid.d).rev() {
            self.idx[axis] += 1;
            if self.idx[axis] < self.grid.n {
                break;
            }
            self.idx[axis] = 0;
        }
        Some(item)
    }
}

/// Tensor rank of the stored samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rank {
    Scalar,
    Vector,
    Matrix,
}

impl Rank {
    pub fn components(&self, d: usize) -> usize {
        match self {
            Rank::Scalar => 1,
            Rank::Vector => d,
            Rank::Matrix => d * d,
        }
    }
}

/// The weight `w(x) = (1 + |x|^2)^{1/2}`; always >= 1.
pub fn weight(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for &xi in x {
        s += xi * xi;
    }
    (1.0 + s).sqrt()
}

/// Real-valued samples of a scalar/vector/matrix field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: GridSpec,
    pub rank: Rank,
    /// Component-outermost: `values[c * n^d + flat]`.
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: GridSpec, rank: Rank) -> Field {
        let len = rank.components(grid.d) * grid.point_count();
        Field { grid, rank, values: vec![0.0; len] }
    }

    pub fn from_values(grid: GridSpec, rank: Rank, values: Vec<f64>) -> Result<Field, FieldError> {
        let want = rank.components(grid.d) * grid.point_count();
        if values.len() != want {
            return Err(FieldError::InvalidGrid(format!(
                "value count {} does not match {} components x {} points",
                values.len(),
                rank.components(grid.d),
                grid.point_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FieldError::InvalidGrid("non-finite sample value".into()));
        }
        Ok(Field { grid, rank, values })
    }

    pub fn from_fn_scalar(grid: GridSpec, f: impl Fn(&Vec3) -> f64) -> Field {
        let mut out = Field::zeros(grid, Rank::Scalar);
        for flat in 0..grid.point_count() {
            let x = grid.point(flat);
            out.values[flat] = f(&x);
        }
        out
    }

    pub fn from_fn_vector(grid: GridSpec, f: impl Fn(&Vec3) -> Vec3) -> Field {
        let mut out = Field::zeros(grid, Rank::Vector);
        let np = grid.point_count();
        for flat in 0..np {
            let x = grid.point(flat);
            let v = f(&x);
            for c in 0..grid.d {
                out.values[c * np + flat] = v[c];
            }
        }
        out
    }

    pub fn from_fn_matrix(grid: GridSpec, f: impl Fn(&Vec3) -> Mat3) -> Field {
        let mut out = Field::zeros(grid, Rank::Matrix);
        let np = grid.point_count();
        for flat in 0..np {
            let x = grid.point(flat);
            let m = f(&x);
            for i in 0..grid.d {
                for j in 0..grid.d {
                    out.values[(i * grid.d + j) * np + flat] = m[i][j];
                }
            }
        }
        out
    }

    pub fn component_count(&self) -> usize {
        self.rank.components(self.grid.d)
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let np = self.grid.point_count();
        &self.values[c * np..(c + 1) * np]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let np = self.grid.point_count();
        &mut self.values[c * np..(c + 1) * np]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Extract one component as a scalar field.
    pub fn component_field(&self, c: usize) -> Field {
        Field { grid: self.grid, rank: Rank::Scalar, values: self.component(c).to_vec() }
    }

    /// Vector value at a grid node (rank must be Vector).
    pub fn vector_at(&self, flat: usize) -> Vec3 {
        debug_assert_eq!(self.rank, Rank::Vector);
        let np = self.grid.point_count();
        let mut out = ZERO_VEC;
        for c in 0..self.grid.d {
            out[c] = self.values[c * np + flat];
        }
        out
    }

    /// Matrix value at a grid node (rank must be Matrix).
    pub fn matrix_at(&self, flat: usize) -> Mat3 {
        debug_assert_eq!(self.rank, Rank::Matrix);
        let np = self.grid.point_count();
        let d = self.grid.d;
        let mut out = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                out[i][j] = self.values[(i * d + j) * np + flat];
            }
        }
        out
    }

    pub fn set_vector_at(&mut self, flat: usize, v: Vec3) {
        debug_assert_eq!(self.rank, Rank::Vector);
        let np = self.grid.point_count();
        for c in 0..self.grid.d {
            self.values[c * np + flat] = v[c];
        }
    }

    pub fn set_matrix_at(&mut self, flat: usize, m: &Mat3) {
        debug_assert_eq!(self.rank, Rank::Matrix);
        let np = self.grid.point_count();
        let d = self.grid.d;
        for i in 0..d {
            for j in 0..d {
                self.values[(i * d + j) * np + flat] = m[i][j];
            }
        }
    }

    pub fn scaled(&self, a: f64) -> Field {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= a;
        }
        out
    }

    pub fn add_scaled(&mut self, other: &Field, a: f64) {
        assert_eq!(self.values.len(), other.values.len());
        for (v, o) in self.values.iter_mut().zip(other.values.iter()) {
            *v += a * o;
        }
    }

    pub fn plus(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn minus(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    /// Max absolute sample over all components.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Partial derivative `D^gamma f` by repeated application of the
    /// one-axis stencil: 2nd-order centered in the interior, 2nd-order
    /// one-sided at the box faces. Exact on quadratics per application.
    pub fn derivative(&self, gamma: &[usize]) -> Result<Field, FieldError> {
        let order: usize = gamma.iter().take(self.grid.d).sum();
        if order > STENCIL_BUDGET {
            return Err(FieldError::OrderTooHigh { requested: order, budget: STENCIL_BUDGET });
        }
        let mut out = self.clone();
        for axis in 0..self.grid.d {
            for _ in 0..gamma[axis] {
                out = out.axis_derivative(axis);
            }
        }
        Ok(out)
    }

    fn axis_derivative(&self, axis: usize) -> Field {
        let grid = self.grid;
        let n = grid.n;
        let inv_2h = 1.0 / (2.0 * grid.h());
        // Stride of one step along `axis` in the flat row-major layout.
        let stride = n.pow((grid.d - 1 - axis) as u32);
        let mut out = Field::zeros(grid, self.rank);
        for c in 0..self.component_count() {
            let src = self.component(c);
            let dst = out.component_mut(c);
            for (flat, idx) in grid.index_iter() {
                let i = idx[axis];
                dst[flat] = if i == 0 {
                    (-3.0 * src[flat] + 4.0 * src[flat + stride] - src[flat + 2 * stride]) * inv_2h
                } else if i == n - 1 {
                    (3.0 * src[flat] - 4.0 * src[flat - stride] + src[flat - 2 * stride]) * inv_2h
                } else {
                    (src[flat + stride] - src[flat - stride]) * inv_2h
                };
            }
        }
        out
    }

    /// Jacobian of a vector field: component `(i, j)` holds `d_j f_i`.
    pub fn jacobian(&self) -> Result<Field, FieldError> {
        assert_eq!(self.rank, Rank::Vector);
        let d = self.grid.d;
        let np = self.grid.point_count();
        let mut out = Field::zeros(self.grid, Rank::Matrix);
        for i in 0..d {
            let fi = self.component_field(i);
            for j in 0..d {
                let mut gamma = [0usize; 3];
                gamma[j] = 1;
                let dfi = fi.derivative(&gamma)?;
                out.values[(i * d + j) * np..(i * d + j + 1) * np].copy_from_slice(dfi.component(0));
            }
        }
        Ok(out)
    }

    /// Gradient of a scalar field as a vector field.
    pub fn gradient(&self) -> Result<Field, FieldError> {
        assert_eq!(self.rank, Rank::Scalar);
        let d = self.grid.d;
        let np = self.grid.point_count();
        let mut out = Field::zeros(self.grid, Rank::Vector);
        for j in 0..d {
            let mut gamma = [0usize; 3];
            gamma[j] = 1;
            let df = self.derivative(&gamma)?;
            out.values[j * np..(j + 1) * np].copy_from_slice(df.component(0));
        }
        Ok(out)
    }

    /// Discrete divergence of a vector field.
    pub fn divergence(&self) -> Result<Field, FieldError> {
        assert_eq!(self.rank, Rank::Vector);
        let mut out = Field::zeros(self.grid, Rank::Scalar);
        for a in 0..self.grid.d {
            let mut gamma = [0usize; 3];
            gamma[a] = 1;
            let da = self.component_field(a).derivative(&gamma)?;
            out.add_scaled(&da, 1.0);
        }
        Ok(out)
    }

    /// Discrete Laplacian: standard second-difference stencil per axis,
    /// one-sided 2nd-order at the faces.
    pub fn laplacian(&self) -> Field {
        let grid = self.grid;
        let n = grid.n;
        let inv_h2 = 1.0 / (grid.h() * grid.h());
        let mut out = Field::zeros(grid, self.rank);
        for axis in 0..grid.d {
            let stride = n.pow((grid.d - 1 - axis) as u32);
            for c in 0..self.component_count() {
                let src = self.component(c);
                let dst = out.component_mut(c);
                for (flat, idx) in grid.index_iter() {
                    let i = idx[axis];
                    let term = if i == 0 {
                        2.0 * src[flat] - 5.0 * src[flat + stride] + 4.0 * src[flat + 2 * stride]
                            - src[flat + 3 * stride]
                    } else if i == n - 1 {
                        2.0 * src[flat] - 5.0 * src[flat - stride] + 4.0 * src[flat - 2 * stride]
                            - src[flat - 3 * stride]
                    } else {
                        src[flat + stride] - 2.0 * src[flat] + src[flat - stride]
                    };
                    dst[flat] += term * inv_h2;
                }
            }
        }
        out
    }

    /// Multilinear interpolation at an off-grid point. Points outside the
    /// box are clamped to the boundary; `clamped` reports whether any
    /// coordinate was clamped.
    pub fn sample_into(&self, x: &Vec3, out: &mut [f64]) -> bool {
        let grid = self.grid;
        let n = grid.n;
        let h = grid.h();
        let half = grid.half_width;
        let d = grid.d;
        let mut cell = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut clamped = false;
        for a in 0..d {
            let mut xa = x[a];
            if xa < -half {
                xa = -half;
                clamped = true;
            } else if xa > half {
                xa = half;
                clamped = true;
            }
            let mut ia = ((xa + half) / h).floor() as isize;
            if ia < 0 {
                ia = 0;
            }
            if ia as usize > n - 2 {
                ia = (n - 2) as isize;
            }
            cell[a] = ia as usize;
            t[a] = ((xa + half) - ia as f64 * h) / h;
        }
        let np = grid.point_count();
        let corners = 1usize << d;
        for (c, slot) in out.iter_mut().enumerate().take(self.component_count()) {
            let comp = &self.values[c * np..(c + 1) * np];
            let mut acc = 0.0;
            for corner in 0..corners {
                let mut wgt = 1.0;
                let mut idx = [0usize; 3];
                for a in 0..d {
                    if corner & (1 << a) != 0 {
                        wgt *= t[a];
                        idx[a] = cell[a] + 1;
                    } else {
                        wgt *= 1.0 - t[a];
                        idx[a] = cell[a];
                    }
                }
                acc += wgt * comp[grid.flat(&idx)];
            }
            *slot = acc;
        }
        clamped
    }

    pub fn sample_scalar(&self, x: &Vec3) -> f64 {
        let mut out = [0.0];
        self.sample_into(x, &mut out);
        out[0]
    }

    pub fn sample_vector(&self, x: &Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        self.sample_into(x, &mut out);
        out
    }

    pub fn sample_matrix(&self, x: &Vec3) -> Mat3 {
        let mut buf = [0.0; 9];
        self.sample_into(x, &mut buf);
        let d = self.grid.d;
        let mut m = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..d {
                m[i][j] = buf[i * d + j];
            }
        }
        m
    }

    /// CSV dump: columns `x_1..x_d`, then one column per component.
    pub fn write_csv(&self, path: &Path) -> Result<(), FieldError> {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.grid.d;
        let nc = self.component_count();
        let mut header: Vec<String> = (1..=d).map(|a| format!("x_{a}")).collect();
        match self.rank {
            Rank::Scalar => header.push("f".into()),
            Rank::Vector => header.extend((1..=d).map(|c| format!("f_{c}"))),
            Rank::Matrix => {
                for i in 1..=d {
                    for j in 1..=d {
                        header.push(format!("f_{i}{j}"));
                    }
                }
            }
        }
        writeln!(file, "{}", header.join(","))?;
        let np = self.grid.point_count();
        for flat in 0..np {
            let x = self.grid.point(flat);
            let mut row: Vec<String> = (0..d).map(|a| format!("{:.17e}", x[a])).collect();
            for c in 0..nc {
                row.push(format!("{:.17e}", self.values[c * np + flat]));
            }
            writeln!(file, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Compact binary dump: magic, dimensions header, then little-endian
    /// f64 samples in storage order.
    pub fn write_binary(&self, path: &Path) -> Result<(), FieldError> {
        let mut file = io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(b"FLD1")?;
        let rank_code: u32 = match self.rank {
            Rank::Scalar => 0,
            Rank::Vector => 1,
            Rank::Matrix => 2,
        };
        file.write_all(&(self.grid.d as u32).to_le_bytes())?;
        file.write_all(&(self.grid.n as u32).to_le_bytes())?;
        file.write_all(&rank_code.to_le_bytes())?;
        file.write_all(&self.grid.half_width.to_le_bytes())?;
        for v in &self.values {
            file.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Field, FieldError> {
        let mut file = io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != b"FLD1" {
            return Err(FieldError::BadDump("bad magic".into()));
        }
        let mut u32buf = [0u8; 4];
        file.read_exact(&mut u32buf)?;
        let d = u32::from_le_bytes(u32buf) as usize;
        file.read_exact(&mut u32buf)?;
        let n = u32::from_le_bytes(u32buf) as usize;
        file.read_exact(&mut u32buf)?;
        let rank = match u32::from_le_bytes(u32buf) {
            0 => Rank::Scalar,
            1 => Rank::Vector,
            2 => Rank::Matrix,
            other => return Err(FieldError::BadDump(format!("bad rank code {other}"))),
        };
        let mut f64buf = [0u8; 8];
        file.read_exact(&mut f64buf)?;
        let half_width = f64::from_le_bytes(f64buf);
        let grid = GridSpec::new(d, half_width, n)
            .map_err(|e| FieldError::BadDump(format!("bad grid header: {e}")))?;
        let len = rank.components(d) * grid.point_count();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            file.read_exact(&mut f64buf)?;
            values.push(f64::from_le_bytes(f64buf));
        }
        // Trailing bytes mean a header/value mismatch.
        if file.read(&mut [0u8; 1])? != 0 {
            return Err(FieldError::BadDump("trailing bytes".into()));
        }
        Field::from_values(grid, rank, values)
    }
}

/// Exponent and integrability parameters of the weighted spaces.
///
/// `sigma = theta - d/p` is the decay exponent that shows up in every
/// runtime estimate; `epsilon` is the Brownian perturbation amplitude
/// (viscosity `epsilon^2 / 2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceParams {
    pub d: usize,
    pub p: f64,
    pub l: usize,
    pub theta: f64,
    /// Extra weight offset for norm variants; 0 in the solver loop.
    pub delta: f64,
    pub epsilon: f64,
}

impl SpaceParams {
    pub fn new(
        d: usize,
        p: f64,
        l: usize,
        theta: f64,
        delta: f64,
        epsilon: f64,
    ) -> Result<Self, FieldError> {
        let sp = SpaceParams { d, p, l, theta, delta, epsilon };
        sp.validate()?;
        Ok(sp)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        let d = self.d as f64;
        if self.d != 2 && self.d != 3 {
            return Err(FieldError::InvalidSpace(format!("d must be 2 or 3, got {}", self.d)));
        }
        if !(self.p > d) {
            return Err(FieldError::InvalidSpace(format!(
                "integrability exponent must satisfy p > d >= 2 (p = {}, d = {})",
                self.p, self.d
            )));
        }
        if self.l < 4 {
            return Err(FieldError::InvalidSpace(format!(
                "derivative order must satisfy l >= 4, got l = {}",
                self.l
            )));
        }
        if self.theta < 1.0 + d / self.p {
            return Err(FieldError::InvalidSpace(format!(
                "weight exponent must satisfy theta >= 1 + d/p = {} (theta = {})",
                1.0 + d / self.p,
                self.theta
            )));
        }
        if self.theta >= d {
            return Err(FieldError::InvalidSpace(format!(
                "weight exponent must satisfy theta < d = {} (theta = {})",
                self.d, self.theta
            )));
        }
        if self.epsilon < 0.0 {
            return Err(FieldError::InvalidSpace(format!(
                "perturbation amplitude must satisfy epsilon >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// `sigma = theta - d/p`, in `[1, d - d/p)`.
    pub fn sigma(&self) -> f64 {
        self.theta - self.d as f64 / self.p
    }
}
