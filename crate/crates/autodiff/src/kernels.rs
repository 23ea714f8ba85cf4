//! Raw-slice kernels shared by the graph ops. Layout is always HWC, row-major.

/// Geometry of a 2-D cross-correlation over an HWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.positions() * plen];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * plen..][..plen];
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
                    let src = (iy as usize * g.w + ix as usize) * g.cin;
                    let dst = (ky * g.k + kx) * g.cin;
                    row[dst..dst + g.cin].copy_from_slice(&input[src..src + g.cin]);
                }
            }
        }
    }
    cols
}

fn col2im_accumulate(g: &ConvGeom, cols: &[f64], grad_input: &mut [f64]) {
    let plen = g.patch_len();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * plen..][..plen];
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
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    let src = (ky * g.k + kx) * g.cin;
                    for (d, s) in grad_input[dst..dst + g.cin]
                        .iter_mut()
                        .zip(&row[src..src + g.cin])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]`, with explicit row/column strides.
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
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided views
    // (checked by debug assertions on every call site's shapes).
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

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (p, plen) = (g.positions(), g.patch_len());
    let mut out = vec![0.0; p * g.cout];
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    gemm(
        p,
        plen,
        g.cout,
        cols,
        (plen as isize, 1),
        kernel,
        (g.cout as isize, 1),
        0.0,
        &mut out,
    );
    out
}

pub(crate) fn conv2d_backward_kernel(
    g: &ConvGeom,
    input: &[f64],
    grad_out: &[f64],
    grad_kernel: &mut [f64],
) {
    let (p, plen) = (g.positions(), g.patch_len());
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        input
    } else {
        owned = im2col(g, input);
        &owned
    };
    // dK[plen, cout] += cols^T[plen, p] * dY[p, cout]
    gemm(
        plen,
        p,
        g.cout,
        cols,
        (1, plen as isize),
        grad_out,
        (g.cout as isize, 1),
        1.0,
        grad_kernel,
    );
}

pub(crate) fn conv2d_backward_input(
    g: &ConvGeom,
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: &mut [f64],
) {
    let (p, plen) = (g.positions(), g.patch_len());
    if g.is_pointwise() {
        gemm(
            p,
            g.cout,
            plen,
            grad_out,
            (g.cout as isize, 1),
            kernel,
            (1, g.cout as isize),
            1.0,
            grad_input,
        );
        return;
    }
    let mut dcols = vec![0.0; p * plen];
    gemm(
        p,
        g.cout,
        plen,
        grad_out,
        (g.cout as isize, 1),
        kernel,
        (1, g.cout as isize),
        0.0,
        &mut dcols,
    );
    col2im_accumulate(g, &dcols, grad_input);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
