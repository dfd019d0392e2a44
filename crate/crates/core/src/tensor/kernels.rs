//! Raw slice kernels shared by the eager tensor API and the tape.
//!
//! Nothing here validates shapes; callers do that first.

use crate::error::{Error, Result};

/// `out[m×n] += op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    out[i * n + j] += dot;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let api = a[p * m + i];
                    if api == 0.0 {
                        continue;
                    }
                    let row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += api * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialize `data` (with `shape`) permuted so that output axis `i` is
/// input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Row softmax over rows of width `cols`. `allowed`, when given, is a
/// `rows_per_matrix × cols` pattern repeated over every matrix; excluded
/// entries get probability zero.
pub fn softmax_rows(x: &[f64], cols: usize, allowed: Option<&[bool]>) -> Result<Vec<f64>> {
    if let Some(i) = x.iter().position(|v| v.is_nan()) {
        return Err(Error::Numeric {
            op: "softmax_rows",
            index: i,
            msg: "NaN input".into(),
        });
    }
    let mut out = vec![0.0; x.len()];
    for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let pat = allowed.map(|p| pattern_row(p, cols, r));
        let ok = |j: usize| pat.is_none_or(|p| p[j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if ok(j) && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let mut s = 0.0;
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if ok(j) {
                *o = (v - mx).exp();
                s += *o;
            }
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    Ok(out)
}

#[inline]
pub(crate) fn pattern_row(pattern: &[bool], cols: usize, row: usize) -> &[bool] {
    let rows = pattern.len() / cols;
    let r = row % rows;
    &pattern[r * cols..(r + 1) * cols]
}

/// Signed absolute-sum row normalization:
/// `y_ij = (x_ij + eps) / (Σ_k |x_ik + eps| + delta)`.
///
/// Entries excluded by `allowed` are structurally absent: they are zero in
/// the output and do not contribute to the denominator. With
/// `eps == delta == 0` a row whose absolute sum is zero is an error.
/// Returns the output and the per-row denominators.
pub fn absact_rows(
    x: &[f64],
    cols: usize,
    eps: f64,
    delta: f64,
    allowed: Option<&[bool]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut out = vec![0.0; x.len()];
    let mut denoms = Vec::with_capacity(x.len() / cols);
    for (r, (row, orow)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let pat = allowed.map(|p| pattern_row(p, cols, r));
        let ok = |j: usize| pat.is_none_or(|p| p[j]);
        let mut s = delta;
        for (j, &v) in row.iter().enumerate() {
            if ok(j) {
                s += (v + eps).abs();
            }
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numeric {
                op: "absact",
                index: r * cols,
                msg: format!("row {r} has absolute sum {s}"),
            });
        }
        for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
            if ok(j) {
                *o = (v + eps) / s;
            }
        }
        denoms.push(s);
    }
    Ok((out, denoms))
}

pub struct LayerNormRows {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layernorm_rows(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> LayerNormRows {
    let d = gain.len();
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormRows { out, xhat, inv_std }
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    out[i * n + j] += av * bv;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_all_transpose_cases() {
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut out = vec![0.0; m * n];
                gemm_acc(ta, tb, m, n, k, &a, &b, &mut out);
                let want = naive(ta, tb, m, n, k, &a, &b);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_3d() {
        // shape (2,3,4) -> perm (2,0,1)
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        // out[l][i][j] = in[i][j][l]
        for l in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[l * 6 + i * 3 + j], data[i * 12 + j * 4 + l]);
                }
            }
        }
    }
}
