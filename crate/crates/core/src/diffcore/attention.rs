//! Fused masked multi-head scaled dot-product attention over fixed windows.

use super::{DiffError, Tensor};

/// Layout of a batched attention call.
///
/// Keys and values hold `N * window` rows (window `n` occupies rows
/// `n * window .. (n + 1) * window`). Queries hold the same rows, or only the
/// newest row of each window when `last_only` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub window: usize,
    pub last_only: bool,
}

impl AttentionSpec {
    pub(crate) fn queries_per_window(&self) -> usize {
        if self.last_only {
            1
        } else {
            self.window
        }
    }
}

/// Returns the attended values and the attention weights
/// (`[window n][head][query i][key j]`, flattened).
pub(crate) fn forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[bool],
    spec: &AttentionSpec,
) -> Result<(Tensor, Vec<f64>), DiffError> {
    let d = k.cols;
    let w = spec.window;
    let nq = spec.queries_per_window();
    if spec.heads == 0 || !d.is_multiple_of(spec.heads) || w == 0 {
        return Err(DiffError::Shape(format!("model dim {d} not divisible into {} heads", spec.heads)));
    }
    if !k.rows.is_multiple_of(w) || v.shape() != k.shape() || q.cols != d || mask.len() != k.rows {
        return Err(DiffError::Shape("attention operands disagree".into()));
    }
    let n_win = k.rows / w;
    if q.rows != n_win * nq {
        return Err(DiffError::Shape(format!("expected {} query rows, got {}", n_win * nq, q.rows)));
    }
    let h = spec.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.rows, d);
    let mut probs = vec![0.0; n_win * h * nq * w];
    let mut scores = vec![0.0; w];
    for n in 0..n_win {
        let m = &mask[n * w..(n + 1) * w];
        if !m.iter().any(|&b| b) {
            return Err(DiffError::AllMasked(n));
        }
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..nq {
                let qrow = &q.row(n * nq + i)[c0..c0 + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..w {
                    if m[j] {
                        let krow = &k.row(n * w + j)[c0..c0 + dh];
                        let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                }
                let p = &mut probs[((n * h + head) * nq + i) * w..][..w];
                let mut total = 0.0;
                for j in 0..w {
                    p[j] = if m[j] { (scores[j] - max).exp() } else { 0.0 };
                    total += p[j];
                }
                let orow = &mut out.data[(n * nq + i) * d + c0..][..dh];
                for j in 0..w {
                    if p[j] == 0.0 {
                        continue;
                    }
                    p[j] /= total;
                    let vrow = &v.row(n * w + j)[c0..c0 + dh];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += p[j] * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Gradients with respect to `(q, k, v)`.
pub(crate) fn backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    probs: &[f64],
    dout: &Tensor,
    spec: &AttentionSpec,
) -> (Tensor, Tensor, Tensor) {
    let d = k.cols;
    let w = spec.window;
    let nq = spec.queries_per_window();
    let n_win = k.rows / w;
    let h = spec.heads;
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.rows, d);
    let mut dk = Tensor::zeros(k.rows, d);
    let mut dv = Tensor::zeros(v.rows, d);
    let mut dp = vec![0.0; w];
    for n in 0..n_win {
        for head in 0..h {
            let c0 = head * dh;
            for i in 0..nq {
                let p = &probs[((n * h + head) * nq + i) * w..][..w];
                let go = &dout.row(n * nq + i)[c0..c0 + dh];
                let mut dot = 0.0;
                for j in 0..w {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vrow = &v.row(n * w + j)[c0..c0 + dh];
                    dp[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    let dvrow = &mut dv.data[(n * w + j) * d + c0..][..dh];
                    for (x, g) in dvrow.iter_mut().zip(go) {
                        *x += p[j] * g;
                    }
                }
                let qrow = &q.row(n * nq + i)[c0..c0 + dh];
                for j in 0..w {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = &k.row(n * w + j)[c0..c0 + dh];
                    let dqrow = &mut dq.data[(n * nq + i) * d + c0..][..dh];
                    for (x, kv) in dqrow.iter_mut().zip(krow) {
                        *x += ds * kv;
                    }
                    let dkrow = &mut dk.data[(n * w + j) * d + c0..][..dh];
                    for (x, qv) in dkrow.iter_mut().zip(qrow) {
                        *x += ds * qv;
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
