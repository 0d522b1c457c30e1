//! Dense CPU kernels for a single `C x H x W` image.

use super::Scalar;

/// `floor((extent + 2 * padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || extent + 2 * padding < kernel {
        return None;
    }
    Some((extent + 2 * padding - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.col_cols()
    }
}

fn im2col<S: Scalar>(g: &ConvGeometry, input: &[S], col: &mut Vec<S>) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let cols = g.col_cols();
    col.clear();
    col.resize(g.col_rows() * cols, S::zero());
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<S: Scalar>(g: &ConvGeometry, col: &[S], input_grad: &mut [S]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_height {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    weight: &[S],
    bias: Option<&[S]>,
    out: &mut [S],
    scratch: &mut Vec<S>,
) {
    let cols = g.col_cols();
    let rows = g.col_rows();
    match bias {
        Some(b) => {
            for (oc, chunk) in out.chunks_mut(cols).enumerate() {
                chunk.fill(b[oc]);
            }
        }
        None => out.fill(S::zero()),
    }
    im2col(g, input, scratch);
    S::gemm(
        g.out_channels,
        rows,
        cols,
        S::one(),
        weight,
        (rows as isize, 1),
        scratch,
        (cols as isize, 1),
        S::one(),
        out,
        (cols as isize, 1),
    );
}

/// Accumulates input, weight and bias gradients for one image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeometry,
    input: &[S],
    weight: &[S],
    out_grad: &[S],
    input_grad: Option<&mut [S]>,
    weight_grad: Option<&mut [S]>,
    bias_grad: Option<&mut [S]>,
    scratch: &mut Vec<S>,
) {
    let cols = g.col_cols();
    let rows = g.col_rows();
    if let Some(bg) = bias_grad {
        for (oc, chunk) in out_grad.chunks(cols).enumerate() {
            bg[oc] += chunk.iter().copied().sum::<S>();
        }
    }
    if let Some(wg) = weight_grad {
        im2col(g, input, scratch);
        // dW += dOut * col^T
        S::gemm(
            g.out_channels,
            cols,
            rows,
            S::one(),
            out_grad,
            (cols as isize, 1),
            scratch,
            (1, cols as isize),
            S::one(),
            wg,
            (rows as isize, 1),
        );
    }
    if let Some(ig) = input_grad {
        scratch.clear();
        scratch.resize(rows * cols, S::zero());
        // dCol = W^T * dOut
        S::gemm(
            rows,
            g.out_channels,
            cols,
            S::one(),
            weight,
            (1, rows as isize),
            out_grad,
            (cols as isize, 1),
            S::zero(),
            scratch,
            (cols as isize, 1),
        );
        col2im_add(g, scratch, ig);
    }
}

/// 2x2 / stride-2 max pooling over `channels` planes. With `ceil` set, a
/// trailing odd row or column forms a clipped window; otherwise the caller
/// guarantees even extents. Ties resolve to the first maximal element in
/// row-major window order. Returns the flat input index of each winner.
pub(crate) fn max_pool2_forward<S: Scalar>(
    input: &[S],
    channels: usize,
    height: usize,
    width: usize,
    ceil: bool,
    out: &mut Vec<S>,
    argmax: &mut Vec<usize>,
) -> (usize, usize) {
    let (oh, ow) = if ceil {
        (height.div_ceil(2), width.div_ceil(2))
    } else {
        (height / 2, width / 2)
    };
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * width + 2 * ox;
                let mut best = input[best_idx];
                for dy in 0..2 {
                    let y = 2 * oy + dy;
                    if y >= height {
                        continue;
                    }
                    for dx in 0..2 {
                        let x = 2 * ox + dx;
                        if x >= width {
                            continue;
                        }
                        let idx = base + y * width + x;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (oh, ow)
}
