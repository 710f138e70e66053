//! Dense kernels over channel-major activations (`[C, N, H, W]`).
//!
//! Channel-major layout makes every convolution a single GEMM whose output
//! is already in layout, and keeps per-channel normalization contiguous.

/// Activation block in `[C, N, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn zeros_like(other: &Act) -> Self {
        Act::zeros(other.c, other.n, other.h, other.w)
    }

    /// Spatial positions per channel across the batch.
    #[inline]
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches for
    // these strides; `c` does not alias `a` or `b`.
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

/// 3x3, stride 1, zero padding 1. Rows are `(cin, ky, kx)`, columns
/// `(n, y, x)`.
pub fn im2col3(x: &Act) -> Vec<f64> {
    let (h, w) = (x.h, x.w);
    let plane = x.plane();
    let mut cols = vec![0.0; x.c * 9 * plane];
    for ci in 0..x.c {
        let src = &x.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                for n in 0..x.n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &src[(n * h + sy as usize) * w..][..w];
                        let dst_row = &mut row[(n * h + y) * w..][..w];
                        match kx {
                            0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                            1 => dst_row.copy_from_slice(src_row),
                            _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &[f64], c: usize, n: usize, h: usize, w: usize) -> Act {
    let mut x = Act::zeros(c, n, h, w);
    let plane = x.plane();
    for ci in 0..c {
        let dst = &mut x.data[ci * plane..(ci + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * plane..][..plane];
                for nn in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[(nn * h + sy as usize) * w..][..w];
                        let src_row = &row[(nn * h + y) * w..][..w];
                        match kx {
                            0 => dst_row[..w - 1]
                                .iter_mut()
                                .zip(&src_row[1..])
                                .for_each(|(d, s)| *d += s),
                            1 => dst_row.iter_mut().zip(src_row).for_each(|(d, s)| *d += s),
                            _ => dst_row[1..]
                                .iter_mut()
                                .zip(&src_row[..w - 1])
                                .for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace(x: &mut Act) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(out: &Act, grad: &mut Act) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the pooled block and the winning
/// offset (0..4) per output cell; ties go to the first offset.
pub fn maxpool2(x: &Act) -> (Act, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    let mut o = 0;
    for cn in 0..x.c * x.n {
        let base = cn * x.h * x.w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * x.w + 2 * xx;
                let cand = [i0, i0 + 1, i0 + x.w, i0 + x.w + 1];
                let mut best = 0;
                for (j, &i) in cand.iter().enumerate().skip(1) {
                    if x.data[i] > x.data[cand[best]] {
                        best = j;
                    }
                }
                out.data[o] = x.data[cand[best]];
                arg[o] = best as u8;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad: &Act, arg: &[u8], h: usize, w: usize) -> Act {
    let mut dx = Act::zeros(grad.c, grad.n, h, w);
    let (oh, ow) = (grad.h, grad.w);
    let mut o = 0;
    for cn in 0..grad.c * grad.n {
        let base = cn * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let i = match arg[o] {
                    0 => i0,
                    1 => i0 + 1,
                    2 => i0 + w,
                    _ => i0 + w + 1,
                };
                dx.data[i] += grad.data[o];
                o += 1;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Act) -> Act {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.n, oh, ow);
    for cn in 0..x.c * x.n {
        let src = &x.data[cn * x.h * x.w..][..x.h * x.w];
        let dst = &mut out.data[cn * oh * ow..][..oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Act) -> Act {
    let (h, w) = (grad.h / 2, grad.w / 2);
    let mut dx = Act::zeros(grad.c, grad.n, h, w);
    for cn in 0..grad.c * grad.n {
        let src = &grad.data[cn * grad.h * grad.w..][..grad.h * grad.w];
        let dst = &mut dx.data[cn * h * w..][..h * w];
        for y in 0..grad.h {
            for xx in 0..grad.w {
                dst[(y / 2) * w + xx / 2] += src[y * grad.w + xx];
            }
        }
    }
    dx
}
