//! Batched elementwise and structured kernels on column-major matrices.
//!
//! Every kernel treats a `DMatrix<f64>` as a batch: one column per sequence
//! lane. The same kernels back both the plain forward pass and the autodiff
//! tape, so the two paths cannot drift apart numerically.

use nalgebra::DMatrix;

pub type Mat = DMatrix<f64>;

pub fn softplus(m: &Mat) -> Mat {
    // Stable form: softplus(x) = max(x, 0) + ln(1 + e^{-|x|}).
    m.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
}

pub fn sigmoid(m: &Mat) -> Mat {
    m.map(|x| 1.0 / (1.0 + (-x).exp()))
}

pub fn tanh(m: &Mat) -> Mat {
    m.map(f64::tanh)
}

pub fn relu(m: &Mat) -> Mat {
    m.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn exp(m: &Mat) -> Mat {
    m.map(f64::exp)
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    a.component_mul(b)
}

/// `a + v·1ᵀ` with `v` a d×1 column (bias broadcast over the batch).
pub fn add_col_broadcast(a: &Mat, v: &Mat) -> Mat {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col += v.column(0);
    }
    out
}

/// `a ⊙ (v·1ᵀ)` with `v` a d×1 column (per-row scale broadcast over the batch).
pub fn mul_col_broadcast(a: &Mat, v: &Mat) -> Mat {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        col.component_mul_assign(&v.column(0));
    }
    out
}

/// Duplicate each row of a lanes×B matrix into an interleaved 2·lanes×B
/// matrix, matching the (re, im) pair layout of complex state lanes.
pub fn expand_pairs(m: &Mat) -> Mat {
    let (lanes, cols) = m.shape();
    let mut out = Mat::zeros(2 * lanes, cols);
    for j in 0..cols {
        for l in 0..lanes {
            let v = m[(l, j)];
            out[(2 * l, j)] = v;
            out[(2 * l + 1, j)] = v;
        }
    }
    out
}

/// Adjoint of [`expand_pairs`]: sum interleaved pair rows back to lanes.
pub fn sum_pairs(m: &Mat) -> Mat {
    let (dim, cols) = m.shape();
    let lanes = dim / 2;
    let mut out = Mat::zeros(lanes, cols);
    for j in 0..cols {
        for l in 0..lanes {
            out[(l, j)] = m[(2 * l, j)] + m[(2 * l + 1, j)];
        }
    }
    out
}

/// Rotate each interleaved (re, im) pair of `h` (2·lanes×B) by the matching
/// angle in `theta` (lanes×B).
pub fn rotate_pairs(theta: &Mat, h: &Mat) -> Mat {
    let (lanes, cols) = theta.shape();
    let mut out = Mat::zeros(2 * lanes, cols);
    for j in 0..cols {
        for l in 0..lanes {
            let (s, c) = theta[(l, j)].sin_cos();
            let re = h[(2 * l, j)];
            let im = h[(2 * l + 1, j)];
            out[(2 * l, j)] = c * re - s * im;
            out[(2 * l + 1, j)] = s * re + c * im;
        }
    }
    out
}

/// Per-pair selector used by max/min/groupsort activations.
///
/// For each disjoint pair (2i, 2i+1) the output is the pair reordered
/// descending (`descending = true`, the max/min convention) or ascending
/// (`descending = false`, groupsort). Ties keep the original order. Returns
/// the output and the per-(pair, column) swap mask for the backward pass.
pub fn pair_select(z: &Mat, descending: bool) -> (Mat, Vec<bool>) {
    let (dim, cols) = z.shape();
    let pairs = dim / 2;
    let mut out = z.clone();
    let mut swaps = vec![false; pairs * cols];
    for j in 0..cols {
        for p in 0..pairs {
            let a = z[(2 * p, j)];
            let b = z[(2 * p + 1, j)];
            let swap = if descending { b > a } else { b < a };
            if swap {
                out[(2 * p, j)] = b;
                out[(2 * p + 1, j)] = a;
                swaps[p * cols + j] = true;
            }
        }
    }
    (out, swaps)
}

/// Apply a recorded swap mask (used to permute adjoints back).
pub fn apply_swaps(g: &Mat, swaps: &[bool]) -> Mat {
    let (dim, cols) = g.shape();
    let pairs = dim / 2;
    let mut out = g.clone();
    for j in 0..cols {
        for p in 0..pairs {
            if swaps[p * cols + j] {
                out[(2 * p, j)] = g[(2 * p + 1, j)];
                out[(2 * p + 1, j)] = g[(2 * p, j)];
            }
        }
    }
    out
}

/// Column-wise layer normalization (z − μ)/σ with σ = √(var + ε).
/// Returns the normalized output and the per-column 1/σ needed backward.
pub fn layer_norm(z: &Mat, eps: f64) -> (Mat, Vec<f64>) {
    let (dim, cols) = z.shape();
    let d = dim as f64;
    let mut out = Mat::zeros(dim, cols);
    let mut inv_sigma = vec![0.0; cols];
    for j in 0..cols {
        let col = z.column(j);
        let mean = col.sum() / d;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        inv_sigma[j] = inv;
        for i in 0..dim {
            out[(i, j)] = (z[(i, j)] - mean) * inv;
        }
    }
    (out, inv_sigma)
}

/// Column-wise projection onto the unit sphere z/‖z‖₂. Columns with norm
/// below `min_norm` are reported via the returned index.
pub fn sphere(z: &Mat, min_norm: f64) -> Result<(Mat, Vec<f64>), usize> {
    let (dim, cols) = z.shape();
    let mut out = Mat::zeros(dim, cols);
    let mut norms = vec![0.0; cols];
    for j in 0..cols {
        let n = z.column(j).norm();
        if n < min_norm {
            return Err(j);
        }
        norms[j] = n;
        for i in 0..dim {
            out[(i, j)] = z[(i, j)] / n;
        }
    }
    Ok((out, norms))
}
