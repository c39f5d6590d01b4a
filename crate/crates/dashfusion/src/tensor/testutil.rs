//! Straight-line f64 oracles for unit tests. Deliberately independent of
//! the tape: plain nested loops transcribing the defining formulas.

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn naive_transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn naive_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        for (o, e) in out[r * cols..(r + 1) * cols].iter_mut().zip(&exps) {
            *o = e / denom;
        }
    }
    out
}

pub fn naive_layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    rows: usize,
    d: usize,
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; rows * d];
    for r in 0..rows {
        let xs = &x[r * d..(r + 1) * d];
        let mean = xs.iter().sum::<f64>() / d as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out[r * d + i] = (xs[i] - mean) * inv * gamma[i] + beta[i];
        }
    }
    out
}

/// Single-head scaled dot-product cross-attention:
/// softmax(Xt Wq (Xs Wk)^T / sqrt(dk)) (Xs Wv).
#[allow(clippy::too_many_arguments)]
pub fn naive_cross_attention(
    x_t: &[f64],
    x_s: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    t_t: usize,
    t_s: usize,
    d: usize,
    d_k: usize,
    d_v: usize,
) -> Vec<f64> {
    let q = naive_matmul(x_t, wq, t_t, d, d_k);
    let k = naive_matmul(x_s, wk, t_s, d, d_k);
    let v = naive_matmul(x_s, wv, t_s, d, d_v);
    let kt = naive_transpose(&k, t_s, d_k);
    let mut scores = naive_matmul(&q, &kt, t_t, d_k, t_s);
    let scale = 1.0 / (d_k as f64).sqrt();
    for s in scores.iter_mut() {
        *s *= scale;
    }
    let attn = naive_softmax_rows(&scores, t_t, t_s);
    naive_matmul(&attn, &v, t_t, t_s, d_v)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "{what}: index {i}: {x} vs {y} (tol {tol})"
        );
    }
}
