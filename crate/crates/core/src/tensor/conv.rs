//! Convolution kernels built on im2col and a blocked GEMM.

/// `c = beta * c + op(a) * op(b)` with `op(a)` m x k and `op(b)` k x n,
/// all row-major. `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted slice lengths.
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

/// Sliding-window geometry between an image `[channels, height, width]` and
/// the `out_h x out_w` grid of kernel placements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds `image` into a `[rows, cols]` patch matrix.
    pub fn im2col(&self, image: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows() * self.cols()];
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * self.cols()..(row + 1) * self.cols()];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let dst_row = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`Window::im2col`]: scatter-adds patches into `image`.
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let k = self.kernel;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * self.cols()..(row + 1) * self.cols()];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst_row =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let src_row = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(
    win: &Window,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
) -> Vec<f64> {
    let cols = win.im2col(input);
    let mut out = vec![0.0; c_out * win.cols()];
    if let Some(bias) = bias {
        for (o, b) in bias.iter().enumerate() {
            out[o * win.cols()..(o + 1) * win.cols()].fill(*b);
        }
    }
    gemm(c_out, win.rows(), win.cols(), weight, false, &cols, false, &mut out, 1.0);
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    win: &Window,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_out: usize,
    need: (bool, bool, bool),
) -> ConvGrads {
    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if need.1 {
        let cols = win.im2col(input);
        let mut dw = vec![0.0; c_out * win.rows()];
        gemm(c_out, win.cols(), win.rows(), grad_out, false, &cols, true, &mut dw, 0.0);
        grads.weight = Some(dw);
    }
    if need.0 {
        let mut dcols = vec![0.0; win.rows() * win.cols()];
        gemm(win.rows(), c_out, win.cols(), weight, true, grad_out, false, &mut dcols, 0.0);
        let mut dx = vec![0.0; win.channels * win.height * win.width];
        win.col2im(&dcols, &mut dx);
        grads.input = Some(dx);
    }
    if need.2 {
        grads.bias = Some(
            grad_out
                .chunks_exact(win.cols())
                .map(|row| row.iter().sum())
                .collect(),
        );
    }
    grads
}

/// Transposed convolution: the adjoint of a convolution whose image side is
/// the output. `win` describes that output image; `weight` is
/// `[c_in, c_out, k, k]` and `input` is `[c_in, win.out_h, win.out_w]`.
pub(crate) fn conv_transpose2d_forward(
    win: &Window,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    c_in: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; win.rows() * win.cols()];
    gemm(win.rows(), c_in, win.cols(), weight, true, input, false, &mut cols, 0.0);
    let mut out = vec![0.0; win.channels * win.height * win.width];
    win.col2im(&cols, &mut out);
    if let Some(bias) = bias {
        let plane = win.height * win.width;
        for (o, b) in bias.iter().enumerate() {
            for v in &mut out[o * plane..(o + 1) * plane] {
                *v += b;
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    win: &Window,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    c_in: usize,
    need: (bool, bool, bool),
) -> ConvGrads {
    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    let dcols = if need.0 || need.1 {
        win.im2col(grad_out)
    } else {
        Vec::new()
    };
    if need.0 {
        let mut dx = vec![0.0; c_in * win.cols()];
        gemm(c_in, win.rows(), win.cols(), weight, false, &dcols, false, &mut dx, 0.0);
        grads.input = Some(dx);
    }
    if need.1 {
        let mut dw = vec![0.0; c_in * win.rows()];
        gemm(c_in, win.cols(), win.rows(), input, false, &dcols, true, &mut dw, 0.0);
        grads.weight = Some(dw);
    }
    if need.2 {
        let plane = win.height * win.width;
        grads.bias = Some(
            grad_out
                .chunks_exact(plane)
                .map(|p| p.iter().sum())
                .collect(),
        );
    }
    grads
}
