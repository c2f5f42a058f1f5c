//! Dense kernels shared by the tape primitives.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the asserts above pin every buffer to the extent implied by
    // the dimensions and strides handed to the kernel.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution over an NCHW batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: usize, stride: usize, padding: usize) -> Option<Self> {
        let [batch, in_channels, height, width] = *input else {
            return None;
        };
        if stride == 0 || kernel == 0 || height + 2 * padding < kernel || width + 2 * padding < kernel {
            return None;
        }
        Some(ConvGeom {
            batch,
            in_channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (height + 2 * padding - kernel) / stride + 1,
            out_width: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the column matrix: one per (example, oy, ox).
    pub fn positions(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then_some((iy, ix))
    }
}

/// Unfold `input` into a `[C·k·k, N·Ho·Wo]` column matrix.
pub(crate) fn im2col(g: &ConvGeom, input: &[f64]) -> Vec<f64> {
    let positions = g.positions();
    let plane = g.out_height * g.out_width;
    let mut cols = vec![0.0; g.patch_len() * positions];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * g.height * g.width..];
                    for oy in 0..g.out_height {
                        for ox in 0..g.out_width {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                dst[n * plane + oy * g.out_width + ox] = src[iy * g.width + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto the input grid.
pub(crate) fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let positions = g.positions();
    let plane = g.out_height * g.out_width;
    let mut out = vec![0.0; g.batch * g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for n in 0..g.batch {
                    let base = (n * g.in_channels + c) * g.height * g.width;
                    for oy in 0..g.out_height {
                        for ox in 0..g.out_width {
                            if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                                out[base + iy * g.width + ix] += src[n * plane + oy * g.out_width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
