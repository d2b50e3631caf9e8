use super::{Scalar, Tensor};
use crate::error::Result;

/// Half-pixel-centred taps for doubling one axis of length `len`.
fn taps<S: Scalar>(len: usize) -> Vec<(usize, usize, S, S)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            (i0, i1, S::lit(1.0 - frac), S::lit(frac))
        })
        .collect()
}

/// Bilinear 2x upsampling of a rank-4 tensor `[n, c, h, w] -> [n, c, 2h, 2w]`.
pub fn upsample_bilinear2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    let tx = taps::<S>(w);
    let ty = taps::<S>(h);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut rows = vec![S::zero(); h * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                rows[y * ow + ox] = w0 * s[i0] + w1 * s[i1];
            }
        }
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            let (r0, r1) = (&rows[i0 * ow..(i0 + 1) * ow], &rows[i1 * ow..(i1 + 1) * ow]);
            for (ox, d) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *d = w0 * r0[ox] + w1 * r1[ox];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample_bilinear2x`]; `grad` has the upsampled shape.
pub fn upsample_bilinear2x_backward<S: Scalar>(grad: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, oh, ow) = grad.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let tx = taps::<S>(w);
    let ty = taps::<S>(h);
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut rows = vec![S::zero(); h * ow];
    for (g, dst) in grad.data().chunks(oh * ow).zip(out.data_mut().chunks_mut(h * w)) {
        rows.iter_mut().for_each(|r| *r = S::zero());
        for (oy, &(i0, i1, w0, w1)) in ty.iter().enumerate() {
            for ox in 0..ow {
                let v = g[oy * ow + ox];
                rows[i0 * ow + ox] += w0 * v;
                rows[i1 * ow + ox] += w1 * v;
            }
        }
        for y in 0..h {
            let d = &mut dst[y * w..(y + 1) * w];
            for (ox, &(i0, i1, w0, w1)) in tx.iter().enumerate() {
                let v = rows[y * ow + ox];
                d[i0] += w0 * v;
                d[i1] += w1 * v;
            }
        }
    }
    Ok(out)
}
