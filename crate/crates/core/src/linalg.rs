//! Small fixed-size helpers shared by the flow and momentum code.
//!
//! Points and matrices are stored in `[f64; 3]` / `[[f64; 3]; 3]` with only
//! the first `d` entries active; the spatial dimension is a runtime value.

/// A point or vector with `d <= 3` active components.
pub type Vec3 = [f64; 3];
/// A `d x d` matrix stored row-major in a 3x3 block.
pub type Mat3 = [[f64; 3]; 3];

pub const ZERO_VEC: Vec3 = [0.0; 3];

pub fn identity() -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        m[i][i] = 1.0;
    }
    m
}

pub fn vec_sub(a: Vec3, b: Vec3, d: usize) -> Vec3 {
    let mut out = ZERO_VEC;
    for i in 0..d {
        out[i] = a[i] - b[i];
    }
    out
}

pub fn vec_norm(a: Vec3, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        s += a[i] * a[i];
    }
    s.sqrt()
}

/// out = A * x for the active d x d block.
#[cfg_attr(not(test), allow(dead_code))]
pub fn mat_vec(a: &Mat3, x: Vec3, d: usize) -> Vec3 {
    let mut out = ZERO_VEC;
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += a[i][j] * x[j];
        }
        out[i] = s;
    }
    out
}

/// out = A^T * x for the active d x d block.
pub fn mat_t_vec(a: &Mat3, x: Vec3, d: usize) -> Vec3 {
    let mut out = ZERO_VEC;
    for i in 0..d {
        let mut s = 0.0;
        for j in 0..d {
            s += a[j][i] * x[j];
        }
        out[i] = s;
    }
    out
}

pub fn mat_mul(a: &Mat3, b: &Mat3, d: usize) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// out = A^T * B * A for the active block.
pub fn congruence(a: &Mat3, b: &Mat3, d: usize) -> Mat3 {
    let ba = mat_mul(b, a, d);
    let mut out = [[0.0; 3]; 3];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k][i] * ba[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn det(a: &Mat3, d: usize) -> f64 {
    match d {
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        3 => {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
                - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        }
        _ => panic!("unsupported dimension {d}"),
    }
}

/// Inverse by adjugate; returns `None` when |det| <= floor.
pub fn invert(a: &Mat3, d: usize, det_floor: f64) -> Option<Mat3> {
    let dt = det(a, d);
    if dt.abs() <= det_floor {
        return None;
    }
    let inv_dt = 1.0 / dt;
    let mut out = identity();
    match d {
        2 => {
            out[0][0] = a[1][1] * inv_dt;
            out[0][1] = -a[0][1] * inv_dt;
            out[1][0] = -a[1][0] * inv_dt;
            out[1][1] = a[0][0] * inv_dt;
        }
        3 => {
            out[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_dt;
            out[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_dt;
            out[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_dt;
            out[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_dt;
            out[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_dt;
            out[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_dt;
            out[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_dt;
            out[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_dt;
            out[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_dt;
        }
        _ => panic!("unsupported dimension {d}"),
    }
    Some(out)
}

/// Frobenius norm of the active block.
pub fn frobenius(a: &Mat3, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[i][j] * a[i][j];
        }
    }
    s.sqrt()
}

/// Frobenius norm of A - I on the active block.
pub fn frobenius_minus_identity(a: &Mat3, d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = a[i][j] - if i == j { 1.0 } else { 0.0 };
            s += e * e;
        }
    }
    s.sqrt()
}

/// Deterministic pairwise summation. The reduction tree depends only on the
/// slice length, so results are independent of thread count and chunking.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 32 {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}
