//! Slice-level numeric kernels behind the tape operations.
//!
//! Layouts are row-major NCHW. Convolutions are fixed at 3x3, stride 1,
//! zero-padding 1; pooling at 3x3, stride 2, zero-padding 1 with a divisor of
//! 9 regardless of how many window cells fall in the padding.

pub const NORM_EPS: f64 = 1e-5;

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, `c: m x n`,
/// where `a` and `b` may be supplied transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Pairwise summation; error grows with log(n) instead of n.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Unfolds one `cin x h x w` image into `(cin*9) x (h*w)` patch columns.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, o) in out.iter_mut().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub fn conv2d_forward(d: ConvDims, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = d.h * d.w;
    let k9 = d.cin * 9;
    let mut out = vec![0.0; d.batch * d.cout * hw];
    let mut cols = vec![0.0; k9 * hw];
    for b in 0..d.batch {
        im2col(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut cols);
        let o = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        for (plane, &bv) in o.chunks_exact_mut(hw).zip(bias) {
            plane.fill(bv);
        }
        gemm(d.cout, k9, hw, kernel, false, &cols, false, 1.0, o);
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub kernel: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    d: ConvDims,
    x: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let hw = d.h * d.w;
    let k9 = d.cin * 9;
    let mut dx = need[0].then(|| vec![0.0; x.len()]);
    let mut dk = need[1].then(|| vec![0.0; kernel.len()]);
    let db = need[2].then(|| {
        let mut db = vec![0.0; d.cout];
        for b in 0..d.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += pairwise_sum(&grad_out[(b * d.cout + o) * hw..][..hw]);
            }
        }
        db
    });
    let mut cols = vec![0.0; k9 * hw];
    let mut dcols = vec![0.0; k9 * hw];
    for b in 0..d.batch {
        let g = &grad_out[b * d.cout * hw..(b + 1) * d.cout * hw];
        if let Some(dk) = dk.as_mut() {
            im2col(&x[b * d.cin * hw..(b + 1) * d.cin * hw], d.cin, d.h, d.w, &mut cols);
            gemm(d.cout, hw, k9, g, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(k9, d.cout, hw, kernel, true, g, false, 0.0, &mut dcols);
            col2im(&dcols, d.cin, d.h, d.w, &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw]);
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

pub fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// `planes` independent `h x w` planes -> `ceil(h/2) x ceil(w/2)` each.
pub fn avgpool_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for y in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(h) {
                    for x in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(w) {
                        s += src[y * w + x];
                    }
                }
                dst[oy * ow + ox] = s / 9.0;
            }
        }
    }
    out
}

pub fn avgpool_backward(planes: usize, h: usize, w: usize, grad_out: &[f64]) -> Vec<f64> {
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = g[oy * ow + ox] / 9.0;
                for y in (2 * oy).saturating_sub(1)..(2 * oy + 2).min(h) {
                    for x in (2 * ox).saturating_sub(1)..(2 * ox + 2).min(w) {
                        dst[y * w + x] += v;
                    }
                }
            }
        }
    }
    dx
}

pub struct NormForward {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-(sample, channel) normalization over the `hw` spatial cells.
pub fn instance_norm_forward(
    batch: usize,
    channels: usize,
    hw: usize,
    x: &[f64],
    scale: &[f64],
    shift: &[f64],
) -> NormForward {
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; batch * channels];
    let n = hw as f64;
    for b in 0..batch {
        for c in 0..channels {
            let p = b * channels + c;
            let src = &x[p * hw..(p + 1) * hw];
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[p] = is;
            for i in 0..hw {
                let xh = (src[i] - mean) * is;
                xhat[p * hw + i] = xh;
                out[p * hw + i] = scale[c] * xh + shift[c];
            }
        }
    }
    NormForward { out, xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward(
    batch: usize,
    channels: usize,
    hw: usize,
    xhat: &[f64],
    inv_std: &[f64],
    scale: &[f64],
    grad_out: &[f64],
    need: [bool; 3],
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = need[0].then(|| vec![0.0; xhat.len()]);
    let mut dscale = need[1].then(|| vec![0.0; channels]);
    let mut dshift = need[2].then(|| vec![0.0; channels]);
    let n = hw as f64;
    for b in 0..batch {
        for c in 0..channels {
            let p = b * channels + c;
            let g = &grad_out[p * hw..(p + 1) * hw];
            let xh = &xhat[p * hw..(p + 1) * hw];
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
            if let Some(ds) = dscale.as_mut() {
                ds[c] += sum_gx;
            }
            if let Some(dh) = dshift.as_mut() {
                dh[c] += sum_g;
            }
            if let Some(dx) = dx.as_mut() {
                let k = scale[c] * inv_std[p];
                let mg = sum_g / n;
                let mgx = sum_gx / n;
                for i in 0..hw {
                    dx[p * hw + i] = k * (g[i] - mg - xh[i] * mgx);
                }
            }
        }
    }
    (dx, dscale, dshift)
}

/// `x: batch x features`, `weight: classes x features` -> `batch x classes`.
pub fn linear_forward(batch: usize, features: usize, classes: usize, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * classes);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    gemm(batch, features, classes, x, false, weight, true, 1.0, &mut out);
    out
}

/// Row-wise log-softmax probabilities and mean cross-entropy.
pub fn cross_entropy_forward(batch: usize, classes: usize, logits: &[f64], labels: &[usize]) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut losses = Vec::with_capacity(batch);
    for b in 0..batch {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for (p, v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
        losses.push(lse - row[labels[b]]);
    }
    (pairwise_sum(&losses) / batch as f64, probs)
}
