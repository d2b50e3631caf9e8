use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::flow::FlowField;

#[derive(Debug, Clone)]
pub struct WarpGrads<S> {
    pub image: Tensor<S>,
    pub flow: FlowField<S>,
}

struct Sample<S> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: S,
    fy: S,
    clamped_x: bool,
    clamped_y: bool,
}

fn locate<S: Scalar>(pos: S, len: usize) -> (usize, usize, S, bool) {
    let max = S::lit((len - 1) as f64);
    let clamped = pos < S::zero() || pos > max;
    let p = pos.max(S::zero()).min(max);
    let i0 = p.floor().to_usize().unwrap_or(0).min(len.saturating_sub(2));
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, p - S::lit(i0 as f64), clamped)
}

fn sample_at<S: Scalar>(x: usize, y: usize, u: S, v: S, h: usize, w: usize) -> Sample<S> {
    let (x0, x1, fx, clamped_x) = locate(S::lit(x as f64) + u, w);
    let (y0, y1, fy, clamped_y) = locate(S::lit(y as f64) + v, h);
    Sample {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        clamped_x,
        clamped_y,
    }
}

fn check<S: Scalar>(image: &Tensor<S>, flow: &FlowField<S>) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] if h == flow.height() && w == flow.width() && h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::shape("bilinear_warp", &[flow.height(), flow.width()], image.shape())),
    }
}

/// Inverse warp: `out(x, y) = image(x + u(x, y), y + v(x, y))`, bilinearly
/// interpolated with sample coordinates clamped to the image border.
pub fn bilinear_warp<S: Scalar>(image: &Tensor<S>, flow: &FlowField<S>) -> Result<Tensor<S>> {
    let (h, w) = check(image, flow)?;
    let img = image.data();
    let (us, vs) = (flow.u(), flow.v());
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let s = sample_at(x, y, us[i], vs[i], h, w);
            let one = S::one();
            out.data_mut()[i] = (one - s.fx) * (one - s.fy) * img[s.y0 * w + s.x0]
                + s.fx * (one - s.fy) * img[s.y0 * w + s.x1]
                + (one - s.fx) * s.fy * img[s.y1 * w + s.x0]
                + s.fx * s.fy * img[s.y1 * w + s.x1];
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of [`bilinear_warp`] with respect to both the
/// image and the flow. Clamped coordinates receive zero flow gradient.
pub fn bilinear_warp_backward<S: Scalar>(
    image: &Tensor<S>,
    flow: &FlowField<S>,
    grad: &Tensor<S>,
) -> Result<WarpGrads<S>> {
    let (h, w) = check(image, flow)?;
    if grad.shape() != [h, w] {
        return Err(Error::shape("bilinear_warp_backward", &[h, w], grad.shape()));
    }
    let img = image.data();
    let (us, vs) = (flow.u(), flow.v());
    let mut g_img = Tensor::zeros(&[h, w]);
    let mut g_flow = FlowField::zeros(h, w);
    let one = S::one();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let g = grad.data()[i];
            if g == S::zero() {
                continue;
            }
            let s = sample_at(x, y, us[i], vs[i], h, w);
            let (i00, i10, i01, i11) = (s.y0 * w + s.x0, s.y0 * w + s.x1, s.y1 * w + s.x0, s.y1 * w + s.x1);
            let gi = g_img.data_mut();
            gi[i00] += g * (one - s.fx) * (one - s.fy);
            gi[i10] += g * s.fx * (one - s.fy);
            gi[i01] += g * (one - s.fx) * s.fy;
            gi[i11] += g * s.fx * s.fy;
            let (gu, gv) = g_flow.planes_mut();
            if !s.clamped_x && s.x1 != s.x0 {
                gu[i] = g * ((one - s.fy) * (img[i10] - img[i00]) + s.fy * (img[i11] - img[i01]));
            }
            if !s.clamped_y && s.y1 != s.y0 {
                gv[i] = g * ((one - s.fx) * (img[i01] - img[i00]) + s.fx * (img[i11] - img[i10]));
            }
        }
    }
    Ok(WarpGrads {
        image: g_img,
        flow: g_flow,
    })
}
