//! Dense f64 kernels used by the policy network.
//!
//! Matrices are row-major `&[f64]` slices. All reductions run in ascending
//! index order so that results are bitwise reproducible across runs and
//! across the batched / incremental forward paths.

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &b_lj) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_lj;
            }
        }
    }
}

/// out[m,k] += a[m,n] * b^T where b is [k,n]
pub fn matmul_bt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            out_row[l] += dot(a_row, b_row);
        }
    }
}

/// out[k,n] += a^T * b where a is [m,k], b is [m,n]
pub fn matmul_at_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_il * b_ij;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Softmax of `x` written into `out`. Stable under large logits.
pub fn softmax_into(out: &mut [f64], x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    let mut m = f64::NEG_INFINITY;
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Backward through softmax: given probs `p` and upstream `dp`, writes
/// `dlogits[j] = p[j] * (dp[j] - sum_i p[i] dp[i])`.
pub fn softmax_backward_into(dlogits: &mut [f64], p: &[f64], dp: &[f64]) {
    let s = dot(p, dp);
    for ((dl, &pi), &dpi) in dlogits.iter_mut().zip(p).zip(dp) {
        *dl = pi * (dpi - s);
    }
}

pub const RMS_EPS: f64 = 1e-8;

/// Parameter-free RMS normalization of one row. Returns the reciprocal norm
/// needed by the backward pass.
pub fn rmsnorm_into(out: &mut [f64], x: &[f64]) -> f64 {
    debug_assert_eq!(out.len(), x.len());
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
    inv
}

/// Backward through rmsnorm: accumulates into `dx`.
pub fn rmsnorm_backward_acc(dx: &mut [f64], dy: &[f64], x: &[f64], inv: f64) {
    let n = x.len() as f64;
    let coef = inv * inv * inv / n * dot(dy, x);
    for ((d, &dyi), &xi) in dx.iter_mut().zip(dy).zip(x) {
        *d += inv * dyi - coef * xi;
    }
}

/// Squared ReLU used inside the mixer blocks.
pub fn relu2(x: f64) -> f64 {
    if x > 0.0 {
        x * x
    } else {
        0.0
    }
}

pub fn relu2_grad(x: f64) -> f64 {
    if x > 0.0 {
        2.0 * x
    } else {
        0.0
    }
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0; 4];
        matmul_acc(&mut out, &a, &b, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = [1.0, -2.0, 0.5, 3.0, 1.5, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 4.0, 2.5]; // 2x3
        // a^T b : 3x3
        let mut at_b = vec![0.0; 9];
        matmul_at_acc(&mut at_b, &a, &b, 2, 3, 3);
        let mut expect = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for r in 0..2 {
                    expect[i * 3 + j] += a[r * 3 + i] * b[r * 3 + j];
                }
            }
        }
        for (x, y) in at_b.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // a b^T : 2x2
        let mut a_bt = vec![0.0; 4];
        matmul_bt_acc(&mut a_bt, &a, &b, 2, 3, 2);
        let mut expect2 = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..3 {
                    expect2[i * 2 + j] += a[i * 3 + l] * b[j * 3 + l];
                }
            }
        }
        for (x, y) in a_bt.iter().zip(&expect2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1000.0, 999.0, -50.0];
        let mut p = [0.0; 3];
        softmax_into(&mut p, &x);
        let s: f64 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }
}
