//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All kernels run in a fixed sequential order so results are reproducible
//! bit-for-bit regardless of caller threading.

/// C[m,n] = op(A) * op(B).
///
/// Storage: A is `[k,m]` when `ta` else `[m,k]`; B is `[n,k]` when `tb`
/// else `[k,n]`. Row-major throughout.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for l in 0..k {
                    let av = a[i * k + l];
                    let brow = &b[l * n..(l + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&av, &bv) in arow.iter().zip(brow.iter()) {
                        s += av * bv;
                    }
                    c[i * n + j] = s;
                }
            }
        }
        (true, false) => {
            for l in 0..k {
                let arow = &a[l * m..(l + 1) * m];
                let brow = &b[l * n..(l + 1) * n];
                for i in 0..m {
                    let av = arow[i];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for l in 0..k {
                        s += a[l * m + i] * b[j * k + l];
                    }
                    c[i * n + j] = s;
                }
            }
        }
    }
    c
}

/// Valid output range along one axis for a kernel offset `k` with padding
/// `p`: output positions o where 0 <= o + k - p < n.
fn valid_range(k: usize, p: usize, n: usize, n_out: usize) -> (usize, usize) {
    let lo = p.saturating_sub(k);
    let hi = (n + p - k).min(n_out);
    (lo, hi.max(lo))
}

/// Direct 3x3-style convolution, stride 1, zero padding `pad`.
/// x: [ci,h,w], w: [co,ci,kh,kw], bias: [co] -> [co, oh, ow].
///
/// Loops are arranged as per-row axpy passes over contiguous slices so the
/// inner loop vectorizes.
pub fn conv2d_fwd(
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    bias: &[f64],
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        out[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
        for c in 0..ci {
            let xplane = &x[c * h * w..(c + 1) * h * w];
            let wbase = (o * ci + c) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, h, oh);
                for kx in 0..kw {
                    let wv = wt[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, pad, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        let ix0 = ox_lo + kx - pad;
                        let orow = &mut out[(o * oh + oy) * ow + ox_lo..(o * oh + oy) * ow + ox_hi];
                        let xrow = &xplane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                        for (ov, &xv) in orow.iter_mut().zip(xrow) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of conv2d w.r.t. its input.
pub fn conv2d_bwd_input(
    dy: &[f64],
    (ci, h, w): (usize, usize, usize),
    wt: &[f64],
    (co, kh, kw): (usize, usize, usize),
    pad: usize,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut dx = vec![0.0; ci * h * w];
    for o in 0..co {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let dxplane = &mut dx[c * h * w..(c + 1) * h * w];
            let wbase = (o * ci + c) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, h, oh);
                for kx in 0..kw {
                    let wv = wt[wbase + ky * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(kx, pad, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        let ix0 = ox_lo + kx - pad;
                        let drow = &dplane[oy * ow + ox_lo..oy * ow + ox_hi];
                        let xrow = &mut dxplane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                        for (xv, &gv) in xrow.iter_mut().zip(drow) {
                            *xv += wv * gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradients of conv2d w.r.t. weight and bias.
pub fn conv2d_bwd_weight(
    dy: &[f64],
    x: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    pad: usize,
) -> (Vec<f64>, Vec<f64>) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut dw = vec![0.0; co * ci * kh * kw];
    let mut db = vec![0.0; co];
    for o in 0..co {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        db[o] = dplane.iter().sum();
        for c in 0..ci {
            let xplane = &x[c * h * w..(c + 1) * h * w];
            let wbase = (o * ci + c) * kh * kw;
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ky, pad, h, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(kx, pad, w, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy + ky - pad;
                        let ix0 = ox_lo + kx - pad;
                        let drow = &dplane[oy * ow + ox_lo..oy * ow + ox_hi];
                        let xrow = &xplane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                        for (&gv, &xv) in drow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                    }
                    dw[wbase + ky * kw + kx] = acc;
                }
            }
        }
    }
    (dw, db)
}

/// Row-wise softmax with max subtraction; `cols` is the reduced axis length.
pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        let inv = 1.0 / denom;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

pub fn softmax_rows_bwd(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    let rows = y.len() / cols;
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

pub fn layer_norm_fwd(x: &[f64], gamma: &[f64], beta: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for ((o, &v), (&g, &b)) in orow.iter_mut().zip(row).zip(gamma.iter().zip(beta)) {
            *o = (v - mean) * inv * g + b;
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_bwd(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    cols: usize,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; cols];
    let mut db = vec![0.0; cols];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for i in 0..cols {
            let xh = (xr[i] - mean) * inv;
            let dxh = gr[i] * gamma[i];
            dg[i] += gr[i] * xh;
            db[i] += gr[i];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh;
        }
        mean_dxh /= cols as f64;
        mean_dxh_xh /= cols as f64;
        for i in 0..cols {
            let xh = (xr[i] - mean) * inv;
            let dxh = gr[i] * gamma[i];
            dx[r * cols + i] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
        }
    }
    (dx, dg, db)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

pub fn gelu_grad(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_A * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_transpose() {
        // A = [[1,2],[3,4]], B = I
        let a = [1.0, 2.0, 3.0, 4.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&a, &eye, 2, 2, 2, false, false), a.to_vec());
        // A * A^T = [[5,11],[11,25]]
        assert_eq!(matmul(&a, &a, 2, 2, 2, false, true), vec![5.0, 11.0, 11.0, 25.0]);
        // A^T * A = [[10,14],[14,20]]
        assert_eq!(matmul(&a, &a, 2, 2, 2, true, false), vec![10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let out = conv2d_fwd(&x, (1, 3, 3), &[1.0], (1, 1, 1), &[0.0], 0);
        assert_eq!(out, x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&[0.0, 0.0, 1.0, 2.0, 3.0, 4.0], 2);
        assert!((y[0] - 0.5).abs() < 1e-15);
        for row in y.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
