use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn zip_with<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    a.check_same_shape(b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn add_backward<S: Scalar>(grad: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    (grad.clone(), grad.clone())
}

pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn mul_backward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, grad: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    Ok((mul(grad, b)?, mul(grad, a)?))
}

pub fn tanh<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.tanh())
}

/// Backward of [`tanh`] from its output `y`: `grad * (1 - y^2)`.
pub fn tanh_backward<S: Scalar>(y: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(y, grad, "tanh_backward", |y, g| g * (S::one() - y * y))
}

pub fn scale<S: Scalar>(x: &Tensor<S>, factor: S) -> Tensor<S> {
    x.map(|v| v * factor)
}

pub fn scale_backward<S: Scalar>(grad: &Tensor<S>, factor: S) -> Tensor<S> {
    grad.map(|g| g * factor)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Backward of [`relu`] from its output; the subgradient at 0 is 0.
pub fn relu_backward<S: Scalar>(y: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(y, grad, "relu_backward", |y, g| if y > S::zero() { g } else { S::zero() })
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_channels", &[1], &[0]))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape("concat_channels", &[n, pc, h, w], p.shape()));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total_c * plane);
    for b in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Tensor::from_vec(&[n, total_c, h, w], data)
}

/// Splits a channel gradient back into parts with the given channel counts.
pub fn concat_channels_backward<S: Scalar>(grad: &Tensor<S>, channels: &[usize]) -> Result<Vec<Tensor<S>>> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::shape("concat_channels_backward", &[channels.iter().sum()], &[c]));
    }
    let plane = h * w;
    let mut out: Vec<Vec<S>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * plane)).collect();
    for b in 0..n {
        let mut offset = b * c * plane;
        for (dst, &pc) in out.iter_mut().zip(channels) {
            dst.extend_from_slice(&grad.data()[offset..offset + pc * plane]);
            offset += pc * plane;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::from_vec(&[n, pc, h, w], d))
        .collect()
}

/// Spatial crop of a rank-4 tensor to `height x width` starting at `(top, left)`.
pub fn crop<S: Scalar>(x: &Tensor<S>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<S>> {
    let (n, c, h, w) = x.dims4()?;
    if top + height > h || left + width > w {
        return Err(Error::CropTooLarge {
            crop_h: top + height,
            crop_w: left + width,
            height: h,
            width: w,
        });
    }
    let mut data = Vec::with_capacity(n * c * height * width);
    for plane in x.data().chunks(h * w) {
        for y in top..top + height {
            data.extend_from_slice(&plane[y * w + left..y * w + left + width]);
        }
    }
    Tensor::from_vec(&[n, c, height, width], data)
}

/// Backward of [`crop`]: scatters into a zero tensor of the original shape.
pub fn crop_backward<S: Scalar>(grad: &Tensor<S>, input_shape: &[usize], top: usize, left: usize) -> Result<Tensor<S>> {
    let (_, _, gh, gw) = grad.dims4()?;
    let mut out = Tensor::zeros(input_shape);
    let (_, _, h, w) = out.dims4()?;
    if top + gh > h || left + gw > w {
        return Err(Error::shape("crop_backward", input_shape, grad.shape()));
    }
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(grad.data().chunks(gh * gw)) {
        for y in 0..gh {
            dst[(top + y) * w + left..(top + y) * w + left + gw].copy_from_slice(&src[y * gw..(y + 1) * gw]);
        }
    }
    Ok(out)
}
