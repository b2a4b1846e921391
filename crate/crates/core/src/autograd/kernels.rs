//! Raw numeric kernels behind the differentiable ops.

use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_out_size(input: usize, kernel: usize, g: ConvGeom) -> usize {
    assert!(
        input + 2 * g.padding >= kernel,
        "kernel {kernel} larger than padded input {input}"
    );
    (input + 2 * g.padding - kernel) / g.stride + 1
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

struct Plan {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: ConvGeom,
}

impl Plan {
    fn new(in_shape: &[usize], w_shape: &[usize], g: ConvGeom) -> Self {
        let (_, c, h, w) = dims4(in_shape);
        let (_, wc, kh, kw) = dims4(w_shape);
        assert_eq!(c, wc, "conv channel mismatch: input {c}, kernel {wc}");
        Self {
            c,
            h,
            w,
            kh,
            kw,
            ho: conv_out_size(h, kh, g),
            wo: conv_out_size(w, kw, g),
            g,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    fn im2col(&self, x: &[f64], out: &mut [f64]) {
        let (s, p) = (self.g.stride as isize, self.g.padding as isize);
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let y = oy as isize * s + i as isize - p;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let xx = ox as isize * s + j as isize - p;
                            *v = if xx < 0 || xx >= self.w as isize {
                                0.0
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols_buf: &[f64], x: &mut [f64]) {
        let (s, p) = (self.g.stride as isize, self.g.padding as isize);
        let cols = self.cols();
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols_buf[row * cols..(row + 1) * cols];
                    for oy in 0..self.ho {
                        let y = oy as isize * s + i as isize - p;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[y as usize * self.w..(y as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let xx = ox as isize * s + j as isize - p;
                            if xx >= 0 && xx < self.w as isize {
                                line[xx as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y[n,o] = sum_c w[o,c] * x[n,c]` without bias.
pub fn conv2d(x: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
    let plan = Plan::new(x.shape(), w.shape(), g);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let in_sz = plan.c * plan.h * plan.w;
    let out_sz = o * plan.cols();
    let mut out = vec![0.0; n * out_sz];
    let mut cols = vec![
        0.0;
        if plan.is_pointwise() {
            0
        } else {
            plan.rows() * plan.cols()
        }
    ];
    for b in 0..n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let colref: &[f64] = if plan.is_pointwise() {
            xb
        } else {
            plan.im2col(xb, &mut cols);
            &cols
        };
        gemm(
            o,
            plan.rows(),
            plan.cols(),
            w.data(),
            false,
            colref,
            false,
            0.0,
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    Tensor::new(&[n, o, plan.ho, plan.wo], out)
}

/// Gradient of [`conv2d`] with respect to its input, given the output gradient.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, in_shape: &[usize], g: ConvGeom) -> Tensor {
    let plan = Plan::new(in_shape, w.shape(), g);
    let n = in_shape[0];
    let o = w.shape()[0];
    assert_eq!(gy.shape(), &[n, o, plan.ho, plan.wo], "conv input-grad shape mismatch");
    let in_sz = plan.c * plan.h * plan.w;
    let out_sz = o * plan.cols();
    let mut dx = vec![0.0; n * in_sz];
    let mut cols = vec![0.0; plan.rows() * plan.cols()];
    for b in 0..n {
        let gb = &gy.data()[b * out_sz..(b + 1) * out_sz];
        let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
        if plan.is_pointwise() {
            gemm(plan.rows(), o, plan.cols(), w.data(), true, gb, false, 0.0, dxb);
        } else {
            gemm(plan.rows(), o, plan.cols(), w.data(), true, gb, false, 0.0, &mut cols);
            plan.col2im(&cols, dxb);
        }
    }
    Tensor::new(in_shape, dx)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, w_shape: &[usize], g: ConvGeom) -> Tensor {
    let plan = Plan::new(x.shape(), w_shape, g);
    let n = x.shape()[0];
    let o = w_shape[0];
    assert_eq!(gy.shape(), &[n, o, plan.ho, plan.wo], "conv weight-grad shape mismatch");
    let in_sz = plan.c * plan.h * plan.w;
    let out_sz = o * plan.cols();
    let mut dw = vec![0.0; o * plan.rows()];
    let mut cols = vec![
        0.0;
        if plan.is_pointwise() {
            0
        } else {
            plan.rows() * plan.cols()
        }
    ];
    for b in 0..n {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let colref: &[f64] = if plan.is_pointwise() {
            xb
        } else {
            plan.im2col(xb, &mut cols);
            &cols
        };
        let gb = &gy.data()[b * out_sz..(b + 1) * out_sz];
        gemm(o, plan.cols(), plan.rows(), gb, false, colref, true, 1.0, &mut dw);
    }
    Tensor::new(w_shape, dw)
}

/// Source taps of 2x bilinear upsampling along one axis (half-pixel centres,
/// edge clamped): output `i` reads `(lo, hi)` with weights `(1 - t, t)`.
fn up_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let t = src - lo as f64;
            (lo, hi, t)
        })
        .collect()
}

/// Bilinear 2x upsampling of an NCHW tensor.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = dims4(x.shape());
    let ty = up_taps(h);
    let tx = up_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Transpose of [`upsample2x`] as a linear map.
pub fn upsample2x_adjoint(g: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dims4(g.shape());
    assert!(oh % 2 == 0 && ow % 2 == 0, "adjoint needs even spatial dims");
    let (h, w) = (oh / 2, ow / 2);
    let ty = up_taps(h);
    let tx = up_taps(w);
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Tensor {
    assert_eq!(table.shape().len(), 2, "gather_rows expects a matrix");
    let (rows, cols) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        assert!(id < rows, "row index {id} out of range {rows}");
        out.extend_from_slice(&table.data()[id * cols..(id + 1) * cols]);
    }
    Tensor::new(&[ids.len(), cols], out)
}

pub fn scatter_rows(src: &Tensor, ids: &[usize], rows: usize) -> Tensor {
    let cols = src.shape()[1];
    let mut out = vec![0.0; rows * cols];
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..cols {
            out[id * cols + j] += src.data()[k * cols + j];
        }
    }
    Tensor::new(&[rows, cols], out)
}
