//! Forward and backward kernels. Feature maps are `(c, h, w)` row-major;
//! vectors are treated as `(n, 1, 1)`.

/// `(channels, height, width)`.
pub type Shape3 = [usize; 3];

pub(crate) fn conv_out(
    in_shape: Shape3,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<Shape3> {
    let [_, h, w] = in_shape;
    if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
        return None;
    }
    Some([
        out_channels,
        (h + 2 * pad - kernel) / stride + 1,
        (w + 2 * pad - kernel) / stride + 1,
    ])
}

pub(crate) fn pool_out(in_shape: Shape3, kernel: usize, stride: usize) -> Option<Shape3> {
    let [c, h, w] = in_shape;
    if h < kernel || w < kernel || stride == 0 || kernel == 0 {
        return None;
    }
    Some([c, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
}

/// Geometry of one convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub input: Shape3,
    pub output: Shape3,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Rows of the unrolled patch matrix: `c_in · k · k`.
    pub fn patch_len(&self) -> usize {
        self.input[0] * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.output[1] * self.output[2]
    }
}

/// Unrolls input patches into a `(c·k·k) × (ho·wo)` matrix; padding reads 0.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64], cols: &mut Vec<f64>) {
    let [c_in, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let k = g.kernel;
    let n = ho * wo;
    cols.clear();
    cols.resize(g.patch_len() * n, 0.0);
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &input[(c * h + iy as usize) * w..][..w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adds column gradients back onto the input gradient.
pub(crate) fn col2im(g: &ConvGeom, dcols: &[f64], dinput: &mut [f64]) {
    let [c_in, h, w] = g.input;
    let [_, ho, wo] = g.output;
    let k = g.kernel;
    let n = ho * wo;
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dinput[(c * h + iy as usize) * w..][..w];
                    let src = &dcols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: every slice covers the index range implied by its shape and
    // strides (checked above in debug builds; callers pass dense buffers).
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
            rsc,
            csc,
        );
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, weights: &[f64], bias: &[f64], cols: &[f64], out: &mut [f64]) {
    let o = g.output[0];
    let (kk, n) = (g.patch_len(), g.positions());
    gemm(
        o,
        kk,
        n,
        weights,
        (kk as isize, 1),
        cols,
        (n as isize, 1),
        0.0,
        out,
        (n as isize, 1),
    );
    for (row, b) in out.chunks_mut(n).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

/// Accumulates weight/bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    weights: &[f64],
    cols: &[f64],
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
    scratch: &mut Vec<f64>,
) {
    let o = g.output[0];
    let (kk, n) = (g.patch_len(), g.positions());
    // dW += dout · colsᵀ
    gemm(
        o,
        n,
        kk,
        dout,
        (n as isize, 1),
        cols,
        (1, n as isize),
        1.0,
        dweights,
        (kk as isize, 1),
    );
    for (db, row) in dbias.iter_mut().zip(dout.chunks(n)) {
        *db += row.iter().sum::<f64>();
    }
    if let Some(dinput) = dinput {
        // dcols = Wᵀ · dout
        scratch.clear();
        scratch.resize(kk * n, 0.0);
        gemm(
            kk,
            o,
            n,
            weights,
            (1, kk as isize),
            dout,
            (n as isize, 1),
            0.0,
            scratch,
            (n as isize, 1),
        );
        col2im(g, scratch, dinput);
    }
}

/// Max pooling; `argmax` records the winning input index of each output, the
/// first maximum in scan order.
pub(crate) fn maxpool_forward(
    input: &[f64],
    in_shape: Shape3,
    out_shape: Shape3,
    kernel: usize,
    stride: usize,
    out: &mut [f64],
    argmax: &mut Vec<usize>,
) {
    let [c, h, w] = in_shape;
    let [_, ho, wo] = out_shape;
    argmax.clear();
    argmax.reserve(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = (ch * h + oy * stride) * w + ox * stride;
                let mut best = input[best_i];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out[(ch * ho + oy) * wo + ox] = best;
                argmax.push(best_i);
            }
        }
    }
}

pub(crate) fn maxpool_backward(argmax: &[usize], dout: &[f64], dinput: &mut [f64]) {
    for (&i, &d) in argmax.iter().zip(dout) {
        dinput[i] += d;
    }
}

pub(crate) fn relu_forward(input: &[f64], out: &mut [f64]) {
    for (o, &x) in out.iter_mut().zip(input) {
        *o = if x > 0.0 { x } else { 0.0 };
    }
}

pub(crate) fn relu_backward(input: &[f64], dout: &[f64], dinput: &mut [f64]) {
    for ((d, &x), &g) in dinput.iter_mut().zip(input).zip(dout) {
        *d = if x > 0.0 { g } else { 0.0 };
    }
}

/// `out = W·x + b` with `W` stored `(out, in)` row-major.
pub(crate) fn dense_forward(weights: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for ((o, row), b) in out.iter_mut().zip(weights.chunks(n_in)).zip(bias) {
        *o = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b;
    }
}

pub(crate) fn dense_backward(
    weights: &[f64],
    input: &[f64],
    dout: &[f64],
    dweights: &mut [f64],
    dbias: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let n_in = input.len();
    for ((drow, db), &g) in dweights.chunks_mut(n_in).zip(dbias.iter_mut()).zip(dout) {
        *db += g;
        if g != 0.0 {
            for (dw, x) in drow.iter_mut().zip(input) {
                *dw += g * x;
            }
        }
    }
    if let Some(dinput) = dinput {
        dinput.fill(0.0);
        for (row, &g) in weights.chunks(n_in).zip(dout) {
            if g != 0.0 {
                for (di, w) in dinput.iter_mut().zip(row) {
                    *di += g * w;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_gemm_matches_direct_convolution() {
        let g = ConvGeom {
            input: [2, 5, 4],
            output: conv_out([2, 5, 4], 3, 3, 2, 1).unwrap(),
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let input: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let weights: Vec<f64> = (0..3 * 18).map(|i| ((i * 5) % 13) as f64 / 13.0 - 0.4).collect();
        let bias = [0.1, -0.2, 0.3];
        let mut cols = Vec::new();
        im2col(&g, &input, &mut cols);
        let mut out = vec![0.0; 3 * g.positions()];
        conv_forward(&g, &weights, &bias, &cols, &mut out);

        let [_, ho, wo] = g.output;
        for o in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[o];
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..4).contains(&ix) {
                                    acc += weights[o * 18 + c * 9 + ky * 3 + kx]
                                        * input[(c * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(o * ho + oy) * wo + ox] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn maxpool_picks_block_maximum() {
        let input = [1.0, 3.0, 2.0, 0.0];
        let mut out = [0.0];
        let mut arg = Vec::new();
        maxpool_forward(&input, [1, 2, 2], [1, 1, 1], 2, 2, &mut out, &mut arg);
        assert_eq!(out[0], 3.0);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut out = [9.0; 3];
        relu_forward(&[-1.0, 0.0, 2.0], &mut out);
        assert_eq!(out, [0.0, 0.0, 2.0]);
    }
}
