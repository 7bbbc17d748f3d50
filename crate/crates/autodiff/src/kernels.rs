//! Raw numeric kernels over row-major slices. The graph operations are thin
//! wrappers around these.

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored as its
/// untransposed row-major matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every addressed element lies inside
    // the slices for the strides chosen, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Geometry of a 2-d convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded matrix: `C·kh·kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the unfolded matrix: `H'·W'`.
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (H'·W')` matrix.
pub fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - pad;
                        *out = if x < 0 || x >= g.width as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image.
pub fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let y = (oy * g.stride + ki) as isize - pad;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kj) as isize - pad;
                        if x >= 0 && x < g.width as isize {
                            dst[x as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping `k×k` max pooling of one `C×H×W` image. Writes the flat
/// input offset of every selected element into `arg`; the first maximum in
/// scan order wins ties.
pub fn max_pool(img: &[f64], channels: usize, h: usize, w: usize, k: usize, out: &mut [f64], arg: &mut [u32]) {
    let (oh, ow) = (h / k, w / k);
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0usize;
                for dy in 0..k {
                    for dx in 0..k {
                        let at = (c * h + oy * k + dy) * w + ox * k + dx;
                        if img[at] > best {
                            best = img[at];
                            best_at = at;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_at as u32;
            }
        }
    }
}

/// Softmax of each row of a `rows × cols` matrix, max-shifted.
pub fn softmax_rows(x: &[f64], cols: usize, out: &mut [f64]) {
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
}
