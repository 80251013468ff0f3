//! Slice-level numeric kernels shared by the tape and the inference path.

/// `out[m x n] = a[m x k] * b[k x n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a[m x k] * b[k x n]`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let a = &a[..m * k];
    let b = &b[..k * n];
    for (arow, row) in a.chunks_exact(k).zip(out[..m * n].chunks_exact_mut(n)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(n)) {
            if aip != 0.0 {
                axpy(aip, brow, row);
            }
        }
    }
}

/// `out += a[m x k] * b[n x k]^T`
pub fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let b = &b[..n * k];
    for (arow, row) in a[..m * k].chunks_exact(k).zip(out[..m * n].chunks_exact_mut(n)) {
        for (o, brow) in row.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(arow, brow);
        }
    }
}

/// `out += a[k x m]^T * b[k x n]`
pub fn matmul_at_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    let out = &mut out[..m * n];
    for (acol, brow) in a[..k * m].chunks_exact(m).zip(b[..k * n].chunks_exact(n)) {
        for (&api, row) in acol.iter().zip(out.chunks_exact_mut(n)) {
            if api != 0.0 {
                axpy(api, brow, row);
            }
        }
    }
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    let mut xc = x.chunks_exact(4);
    let mut yc = y.chunks_exact_mut(4);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        ys[0] += alpha * xs[0];
        ys[1] += alpha * xs[1];
        ys[2] += alpha * xs[2];
        ys[3] += alpha * xs[3];
    }
    for (xv, yv) in xc.remainder().iter().zip(yc.into_remainder()) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ac = a.chunks_exact(4);
    let mut bc = b.chunks_exact(4);
    for (xs, ys) in (&mut ac).zip(&mut bc) {
        acc[0] += xs[0] * ys[0];
        acc[1] += xs[1] * ys[1];
        acc[2] += xs[2] * ys[2];
        acc[3] += xs[3] * ys[3];
    }
    let mut tail = 0.0;
    for (x, y) in ac.remainder().iter().zip(bc.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row normalization to zero mean and unit variance; returns the inverse std.
pub fn layer_norm_into(row: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - mean) * inv_std;
    }
    inv_std
}
