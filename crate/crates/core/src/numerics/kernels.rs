//! Raw forward/backward kernels over flat `f64` buffers.
//!
//! Everything here works on HWC row-major slices; shape checking happens in
//! the callers.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// With `a_t` the buffer `a` holds a `k × m` matrix; with `b_t` the buffer `b`
/// holds an `n × k` matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index reachable with these strides.
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

/// Geometry of a square-kernel 2-D convolution over an HWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Number of output pixels.
    pub fn rows(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one unrolled receptive field.
    pub fn patch(&self) -> usize {
        self.k * self.k * self.c_in
    }

    /// A 1×1 stride-1 unpadded conv is a plain matrix product over the input.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls every receptive field into one row of a `rows × patch` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let c = g.c_in;
    let mut cols = vec![0.0; oh * ow * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * c;
                    let dst = (ky * g.k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let (oh, ow, patch) = (g.out_h(), g.out_w(), g.patch());
    let c = g.c_in;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols[(oy * ow + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * c;
                    let src = (ky * g.k + kx) * c;
                    for (o, v) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Convolution forward pass. Returns the output and, when `keep_cols` is set,
/// the unrolled input needed for the kernel gradient.
pub(crate) fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    g: &ConvGeometry,
    keep_cols: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let rows = g.rows();
    let mut out = vec![0.0; rows * g.c_out];
    if g.is_pointwise() {
        gemm(
            rows, g.c_in, g.c_out, input, false, kernel, false, 0.0, &mut out,
        );
        return (out, None);
    }
    let cols = im2col(input, g);
    gemm(
        rows,
        g.patch(),
        g.c_out,
        &cols,
        false,
        kernel,
        false,
        0.0,
        &mut out,
    );
    (out, keep_cols.then_some(cols))
}

/// Adds `∂L/∂kernel` given the upstream gradient of the conv output.
pub(crate) fn conv2d_kernel_grad(
    cols_or_input: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    kernel_grad: &mut [f64],
) {
    gemm(
        g.patch(),
        g.rows(),
        g.c_out,
        cols_or_input,
        true,
        grad_out,
        false,
        1.0,
        kernel_grad,
    );
}

/// Adds `∂L/∂input` given the upstream gradient of the conv output.
pub(crate) fn conv2d_input_grad(
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    input_grad: &mut [f64],
) {
    let rows = g.rows();
    if g.is_pointwise() {
        gemm(
            rows, g.c_out, g.c_in, grad_out, false, kernel, true, 1.0, input_grad,
        );
        return;
    }
    let mut dcols = vec![0.0; rows * g.patch()];
    gemm(
        rows,
        g.c_out,
        g.patch(),
        grad_out,
        false,
        kernel,
        true,
        0.0,
        &mut dcols,
    );
    col2im_add(&dcols, g, input_grad);
}

/// Interpolation taps along one axis: for each output index, the two source
/// indices and the weight of the second one.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_forward(
    input: &[f64],
    (h, w, c): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let dst = &mut out[(oy * out_w + ox) * c..][..c];
            let corners = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (y, x, weight) in corners {
                if weight == 0.0 {
                    continue;
                }
                let src = &input[(y * w + x) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward(
    grad_out: &[f64],
    (h, w, c): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
    grad_in: &mut [f64],
) {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let src = &grad_out[(oy * out_w + ox) * c..][..c];
            let corners = [
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ];
            for (y, x, weight) in corners {
                if weight == 0.0 {
                    continue;
                }
                let dst = &mut grad_in[(y * w + x) * c..][..c];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += weight * s;
                }
            }
        }
    }
}

/// Max-stabilized softmax over the innermost (channel) axis.
pub(crate) fn softmax_last(input: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (src, dst) in input.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}
