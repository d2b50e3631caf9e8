use super::{MatLayout, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < kernel || self.stride == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn check(
    input: &Tensor<impl Scalar>,
    weight: &Tensor<impl Scalar>,
    geom: ConvGeometry,
) -> Result<Dims> {
    let (n, c, h, w) = input.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        return Err(Error::shape("conv2d weight in-channels", &[o, c, kh, kw], weight.shape()));
    }
    let (Some(oh), Some(ow)) = (geom.output_size(h, kh), geom.output_size(w, kw)) else {
        return Err(Error::shape("conv2d kernel larger than padded input", &[kh, kw], &[h, w]));
    };
    Ok(Dims {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        oh,
        ow,
    })
}

fn is_pointwise(d: &Dims, geom: ConvGeometry) -> bool {
    d.kh == 1 && d.kw == 1 && geom.stride == 1 && geom.padding == 0
}

/// Unfolds one sample `[c, h, w]` into columns `[c * kh * kw, oh * ow]`.
fn im2col<S: Scalar>(src: &[S], d: &Dims, geom: ConvGeometry, col: &mut [S]) {
    let p = d.oh * d.ow;
    let pad = geom.padding as isize;
    for c in 0..d.c {
        let plane = &src[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.iter_mut().for_each(|x| *x = S::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= d.w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back into `[c, h, w]`, accumulating overlaps.
fn col2im<S: Scalar>(col: &[S], d: &Dims, geom: ConvGeometry, dst: &mut [S]) {
    let p = d.oh * d.ow;
    let pad = geom.padding as isize;
    for c in 0..d.c {
        let plane = &mut dst[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = ((c * d.kh + ki) * d.kw + kj) * p;
                let src = &col[row..row + p];
                for oy in 0..d.oh {
                    let iy = (oy * geom.stride + ki) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * geom.stride + kj) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst_row[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `input: [n, c, h, w]`, `weight: [o, c, kh, kw]`,
/// `bias: [o]`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = check(input, weight, geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.o] {
            return Err(Error::shape("conv2d bias", &[d.o], b.shape()));
        }
    }
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let mut out = Tensor::zeros(&[d.n, d.o, d.oh, d.ow]);
    let pointwise = is_pointwise(&d, geom);
    let mut col = if pointwise { Vec::new() } else { vec![S::zero(); k * p] };
    for n in 0..d.n {
        let src = &input.data()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let cols: &[S] = if pointwise {
            src
        } else {
            im2col(src, &d, geom, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[n * d.o * p..(n + 1) * d.o * p];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|x| *x = b.data()[o]);
            }
        }
        S::gemm(
            S::one(),
            weight.data(),
            MatLayout::row_major(d.o, k),
            cols,
            MatLayout::row_major(k, p),
            S::one(),
            dst,
            MatLayout::row_major(d.o, p),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<S> {
    pub input: Option<Tensor<S>>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Backward of [`conv2d`]. Weight and bias gradients are reduced over the
/// batch in ascending sample order. The input gradient is only computed when
/// `want_input` is set.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    geom: ConvGeometry,
    want_input: bool,
) -> Result<Conv2dGrads<S>> {
    let d = check(input, weight, geom)?;
    if grad_out.shape() != [d.n, d.o, d.oh, d.ow] {
        return Err(Error::shape("conv2d_backward grad_out", &[d.n, d.o, d.oh, d.ow], grad_out.shape()));
    }
    let k = d.c * d.kh * d.kw;
    let p = d.oh * d.ow;
    let pointwise = is_pointwise(&d, geom);
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[d.o]);
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));
    let mut col = if pointwise { Vec::new() } else { vec![S::zero(); k * p] };
    let mut dcol = if want_input && !pointwise { vec![S::zero(); k * p] } else { Vec::new() };

    for n in 0..d.n {
        let src = &input.data()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
        let g = &grad_out.data()[n * d.o * p..(n + 1) * d.o * p];
        for (o, chunk) in g.chunks(p).enumerate() {
            grad_b.data_mut()[o] += chunk.iter().copied().sum::<S>();
        }
        let cols: &[S] = if pointwise {
            src
        } else {
            im2col(src, &d, geom, &mut col);
            &col
        };
        // dW[o, k] += sum_p g[o, p] * col[k, p]
        S::gemm(
            S::one(),
            g,
            MatLayout::row_major(d.o, p),
            cols,
            MatLayout::transposed(k, p),
            S::one(),
            grad_w.data_mut(),
            MatLayout::row_major(d.o, k),
        );
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi.data_mut()[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w];
            if pointwise {
                // dX[c, p] = sum_o W[o, c] g[o, p]
                S::gemm(
                    S::one(),
                    weight.data(),
                    MatLayout::transposed(d.o, k),
                    g,
                    MatLayout::row_major(d.o, p),
                    S::zero(),
                    dst,
                    MatLayout::row_major(k, p),
                );
            } else {
                S::gemm(
                    S::one(),
                    weight.data(),
                    MatLayout::transposed(d.o, k),
                    g,
                    MatLayout::row_major(d.o, p),
                    S::zero(),
                    &mut dcol,
                    MatLayout::row_major(k, p),
                );
                col2im(&dcol, &d, geom, dst);
            }
        }
    }
    Ok(Conv2dGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}
