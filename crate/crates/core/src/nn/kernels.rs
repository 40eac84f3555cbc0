//! Forward and backward kernels shared by the autodiff graph and the
//! incremental decoder. Every reduction runs in a fixed sequential order, so
//! results never depend on batch composition or thread count.

use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Exact GeLU, `x * Phi(x)`.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = F::from_f64(0.5);
    let cdf = half * (F::ONE + (x * F::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * F::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// In-place softmax of one contiguous row, with max subtraction.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax along `axis` of a row-major array with the given shape.
pub fn softmax_axis<F: Scalar>(data: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    assert!(
        axis < shape.len(),
        "softmax axis {axis} out of range for {shape:?}"
    );
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = data.to_vec();
    let mut buf = vec![F::ZERO; n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, &b) in buf.iter().enumerate() {
                out[base + j * inner] = b;
            }
        }
    }
    out
}

/// Layer normalization over rows of width `d`. Writes the per-row mean and
/// reciprocal standard deviation when buffers are given.
pub fn layer_norm_forward<F: Scalar>(
    x: &[F],
    d: usize,
    gain: &[F],
    bias: &[F],
    out: &mut [F],
    mut stats: Option<(&mut [F], &mut [F])>,
) {
    let eps = F::from_f64(LAYER_NORM_EPS);
    let inv_d = F::from_f64(1.0 / d as f64);
    for (r, (xr, yr)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let mut var = F::ZERO;
        for &v in xr {
            let c = v - mean;
            var += c * c;
        }
        let rstd = F::ONE / (var * inv_d + eps).sqrt();
        for i in 0..d {
            yr[i] = (xr[i] - mean) * rstd * gain[i] + bias[i];
        }
        if let Some((means, rstds)) = stats.as_mut() {
            means[r] = mean;
            rstds[r] = rstd;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Scalar>(
    x: &[F],
    d: usize,
    gain: &[F],
    means: &[F],
    rstds: &[F],
    dy: &[F],
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let inv_d = F::from_f64(1.0 / d as f64);
    let mut xhat = vec![F::ZERO; d];
    let mut dxhat = vec![F::ZERO; d];
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (mean, rstd) = (means[r], rstds[r]);
        let mut mean_dxhat = F::ZERO;
        let mut mean_dxhat_xhat = F::ZERO;
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * rstd;
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xhat[i];
            dgain[i] += dyr[i] * xhat[i];
            dbias[i] += dyr[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            dxr[i] += rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
        }
    }
}

/// Scaled dot-product attention of one query over `n` keys.
///
/// `probs` receives the attention weights (first `n` entries) and `out` the
/// weighted sum of values.
#[inline]
pub fn attend_one<'a, F: Scalar>(
    q: &[F],
    n: usize,
    key: impl Fn(usize) -> &'a [F],
    value: impl Fn(usize) -> &'a [F],
    scale: F,
    probs: &mut [F],
    out: &mut [F],
) {
    for (j, p) in probs[..n].iter_mut().enumerate() {
        *p = dot(q, key(j)) * scale;
    }
    softmax_in_place(&mut probs[..n]);
    out.fill(F::ZERO);
    for (j, &p) in probs[..n].iter().enumerate() {
        axpy(p, value(j), out);
    }
}

/// Geometry of a packed `[batch * seq, 3 * d]` query/key/value buffer.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub d: usize,
    pub heads: usize,
    pub causal: bool,
}

impl AttnShape {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn scale<F: Scalar>(&self) -> F {
        F::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }

    fn keys_for(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.seq
        }
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.heads * self.seq * self.seq
    }
}

/// Multi-head attention over a packed qkv buffer. `out` is `[batch*seq, d]`,
/// `probs` is `[batch, heads, seq, seq]` (masked entries left at zero).
pub fn attention_forward<F: Scalar>(qkv: &[F], shape: AttnShape, out: &mut [F], probs: &mut [F]) {
    let AttnShape { seq, d, heads, .. } = shape;
    let hd = shape.head_dim();
    let w = 3 * d;
    let scale: F = shape.scale();
    for b in 0..shape.batch {
        for h in 0..heads {
            for i in 0..seq {
                let row = b * seq + i;
                let q = &qkv[row * w + h * hd..row * w + (h + 1) * hd];
                let n = shape.keys_for(i);
                let p_off = ((b * heads + h) * seq + i) * seq;
                let key = |j: usize| {
                    let r = (b * seq + j) * w + d + h * hd;
                    &qkv[r..r + hd]
                };
                let value = |j: usize| {
                    let r = (b * seq + j) * w + 2 * d + h * hd;
                    &qkv[r..r + hd]
                };
                attend_one(
                    q,
                    n,
                    key,
                    value,
                    scale,
                    &mut probs[p_off..p_off + seq],
                    &mut out[row * d + h * hd..row * d + (h + 1) * hd],
                );
            }
        }
    }
}

pub fn attention_backward<F: Scalar>(
    qkv: &[F],
    probs: &[F],
    shape: AttnShape,
    dout: &[F],
    dqkv: &mut [F],
) {
    let AttnShape { seq, d, heads, .. } = shape;
    let hd = shape.head_dim();
    let w = 3 * d;
    let scale: F = shape.scale();
    let mut dp = vec![F::ZERO; seq];
    for b in 0..shape.batch {
        for h in 0..heads {
            for i in 0..seq {
                let row = b * seq + i;
                let n = shape.keys_for(i);
                let p = &probs[((b * heads + h) * seq + i) * seq..][..n];
                let g = &dout[row * d + h * hd..row * d + (h + 1) * hd];
                let mut weighted = F::ZERO;
                for j in 0..n {
                    let vr = (b * seq + j) * w + 2 * d + h * hd;
                    dp[j] = dot(g, &qkv[vr..vr + hd]);
                    weighted += p[j] * dp[j];
                    axpy(p[j], g, &mut dqkv[vr..vr + hd]);
                }
                let qr = row * w + h * hd;
                for j in 0..n {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kr = (b * seq + j) * w + d + h * hd;
                    for t in 0..hd {
                        let kv = qkv[kr + t];
                        let qv = qkv[qr + t];
                        dqkv[qr + t] += ds * kv;
                        dqkv[kr + t] += ds * qv;
                    }
                }
            }
        }
    }
}

/// Mean negative log-likelihood over rows with a target. Returns the loss,
/// the number of counted rows, and the softmax probabilities of counted rows.
pub fn cross_entropy_forward<F: Scalar>(
    logits: &[F],
    vocab: usize,
    targets: &[Option<usize>],
) -> (F, usize, Vec<F>) {
    let mut probs = vec![F::ZERO; logits.len()];
    let mut total = F::ZERO;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut m = row[0];
        for &v in row {
            m = m.max(v);
        }
        let mut sum = F::ZERO;
        for &v in row {
            sum += (v - m).exp();
        }
        let lse = m + sum.ln();
        total += lse - row[t];
        for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
        count += 1;
    }
    let loss = if count == 0 {
        F::ZERO
    } else {
        total / F::from_f64(count as f64)
    };
    (loss, count, probs)
}
