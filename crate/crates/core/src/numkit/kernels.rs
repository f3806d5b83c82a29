//! Raw numeric kernels shared by the gradient graph's forward and backward passes.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! [`super::graph`] before these are called.

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatView<'a> {
    pub(crate) fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatView {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = beta * c + a · b`, with `c` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the views were built from slices whose lengths match their
    // declared shapes and strides, and `c` has exactly m*n row-major slots.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise normalization statistics: `(mean, 1/sqrt(var + eps))` per row.
pub(crate) fn layer_norm_stats(x: &[f64], width: usize) -> Vec<(f64, f64)> {
    x.chunks_exact(width)
        .map(|row| {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
        })
        .collect()
}

pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let width = gain.len();
    let stats = layer_norm_stats(x, width);
    let mut out = vec![0.0; x.len()];
    for ((row, o), (mean, inv)) in x
        .chunks_exact(width)
        .zip(out.chunks_exact_mut(width))
        .zip(stats)
    {
        for j in 0..width {
            o[j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    out
}

/// Accumulates layer-norm input/gain/bias gradients.
pub(crate) fn layer_norm_backward(
    x: &[f64],
    gain: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let width = gain.len();
    let n = width as f64;
    let stats = layer_norm_stats(x, width);
    let mut dgain = dgain;
    let mut dbias = dbias;
    let mut dx = dx;
    let mut xhat = vec![0.0; width];
    let mut dxhat = vec![0.0; width];
    for (r, (mean, inv)) in stats.into_iter().enumerate() {
        let row = &x[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        for j in 0..width {
            xhat[j] = (row[j] - mean) * inv;
            dxhat[j] = dyr[j] * gain[j];
        }
        if let Some(dg) = dgain.as_deref_mut() {
            for j in 0..width {
                dg[j] += dyr[j] * xhat[j];
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for j in 0..width {
                db[j] += dyr[j];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let sum_d: f64 = dxhat.iter().sum();
            let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
            let dxr = &mut dx[r * width..(r + 1) * width];
            for j in 0..width {
                dxr[j] += inv / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx);
            }
        }
    }
}

/// Geometry of a fused causal self-attention call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
}

impl AttnShape {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Softmax probabilities of causal attention for one (batch, head) pair, `seq × seq`
/// lower-triangular (entries above the diagonal are zero).
fn attn_probs(qkv: &[f64], s: AttnShape, b: usize, h: usize, probs: &mut [f64]) {
    let (t, d, hd) = (s.seq, s.width, s.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let stride = 3 * d;
    for i in 0..t {
        let q = &qkv[(b * t + i) * stride + h * hd..][..hd];
        let row = &mut probs[i * t..(i + 1) * t];
        let mut max = f64::NEG_INFINITY;
        for j in 0..=i {
            let k = &qkv[(b * t + j) * stride + d + h * hd..][..hd];
            let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
            row[j] = dot * scale;
            max = max.max(row[j]);
        }
        let mut z = 0.0;
        for p in row.iter_mut().take(i + 1) {
            *p = (*p - max).exp();
            z += *p;
        }
        for p in row.iter_mut().take(i + 1) {
            *p /= z;
        }
        for p in row.iter_mut().skip(i + 1) {
            *p = 0.0;
        }
    }
}

pub(crate) fn causal_attention(qkv: &[f64], s: AttnShape) -> Vec<f64> {
    let (t, d, hd) = (s.seq, s.width, s.head_dim());
    let stride = 3 * d;
    let mut out = vec![0.0; s.batch * t * d];
    let mut probs = vec![0.0; t * t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            attn_probs(qkv, s, b, h, &mut probs);
            for i in 0..t {
                let o = &mut out[(b * t + i) * d + h * hd..][..hd];
                for j in 0..=i {
                    let p = probs[i * t + j];
                    let v = &qkv[(b * t + j) * stride + 2 * d + h * hd..][..hd];
                    for (oe, ve) in o.iter_mut().zip(v) {
                        *oe += p * ve;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates `d qkv` given the output gradient.
pub(crate) fn causal_attention_backward(qkv: &[f64], s: AttnShape, dout: &[f64], dqkv: &mut [f64]) {
    let (t, d, hd) = (s.seq, s.width, s.head_dim());
    let stride = 3 * d;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut probs = vec![0.0; t * t];
    let mut dp = vec![0.0; t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            attn_probs(qkv, s, b, h, &mut probs);
            for i in 0..t {
                let go = &dout[(b * t + i) * d + h * hd..][..hd];
                let prow = &probs[i * t..(i + 1) * t];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let v = &qkv[(b * t + j) * stride + 2 * d + h * hd..][..hd];
                    dp[j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                    weighted += prow[j] * dp[j];
                }
                for j in 0..=i {
                    let p = prow[j];
                    // dV_j += p_ij * dO_i
                    let dv = &mut dqkv[(b * t + j) * stride + 2 * d + h * hd..][..hd];
                    for (dve, ge) in dv.iter_mut().zip(go) {
                        *dve += p * ge;
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for e in 0..hd {
                        let kj = qkv[(b * t + j) * stride + d + h * hd + e];
                        let qi = qkv[(b * t + i) * stride + h * hd + e];
                        dqkv[(b * t + i) * stride + h * hd + e] += ds * kj;
                        dqkv[(b * t + j) * stride + d + h * hd + e] += ds * qi;
                    }
                }
            }
        }
    }
}

/// Numerically stable `log(sum(exp(row)))` and the row's softmax.
pub(crate) fn log_softmax_row(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    max + z.ln()
}
