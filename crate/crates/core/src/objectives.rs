//! Self-supervised and supervised flow losses, and evaluation metrics.
//!
//! Every loss returns its value together with the gradient with respect to
//! the predicted flow. Images are treated as constants.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::{bilinear_warp, bilinear_warp_backward, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Smoothness weight.
    pub alpha: f64,
    /// Charbonnier exponent.
    pub r: f64,
    /// Charbonnier epsilon.
    pub eta: f64,
    /// Divide photometric and smoothness sums by their pixel counts.
    pub normalize: bool,
    /// Restrict the photometric term to pixels that contain events.
    pub photometric_event_mask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 10.0,
            r: 0.45,
            eta: 1e-3,
            normalize: true,
            photometric_event_mask: false,
        }
    }
}

impl LossConfig {
    /// Unnormalized sums, as used by the closed-form examples.
    pub fn sums() -> Self {
        LossConfig {
            normalize: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !(self.r > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("loss needs eta > 0, r > 0, alpha >= 0".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the flow.
#[derive(Debug, Clone)]
pub struct LossValue<S> {
    pub value: f64,
    pub grad: FlowField<S>,
}

pub fn charbonnier_scalar(x: f64, r: f64, eta: f64) -> f64 {
    (x * x + eta * eta).powf(r)
}

pub fn charbonnier_derivative(x: f64, r: f64, eta: f64) -> f64 {
    2.0 * r * x * (x * x + eta * eta).powf(r - 1.0)
}

/// Elementwise `(x^2 + eta^2)^r`.
pub fn charbonnier<S: Scalar>(x: &Tensor<S>, r: f64, eta: f64) -> Tensor<S> {
    x.map(|v| S::lit(charbonnier_scalar(v.to_f64_lossy(), r, eta)))
}

pub fn charbonnier_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>, r: f64, eta: f64) -> Result<Tensor<S>> {
    x.check_same_shape(grad, "charbonnier_backward")?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&v, &g)| g * S::lit(charbonnier_derivative(v.to_f64_lossy(), r, eta)))
        .collect();
    Tensor::from_vec(x.shape(), data)
}

fn image_dims<S: Scalar>(img: &Tensor<S>) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("image", &[0, 0], img.shape())),
    }
}

fn as_plane<S: Scalar>(img: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = image_dims(img)?;
    img.clone().reshape(&[h, w])
}

/// Interior pixels (one-pixel border removed), optionally intersected with
/// an event mask.
pub fn interior_mask(height: usize, width: usize, events: Option<&[bool]>) -> Vec<bool> {
    (0..height * width)
        .map(|i| {
            let (y, x) = (i / width, i % width);
            let inside = y > 0 && x > 0 && y + 1 < height && x + 1 < width;
            inside && events.map_or(true, |m| m[i])
        })
        .collect()
}

/// Charbonnier penalty of `I_t - warp(I_tdt, flow)` over interior pixels.
/// `events` restricts the sum further when
/// [`LossConfig::photometric_event_mask`] is set.
pub fn photometric_loss<S: Scalar>(
    i_t: &Tensor<S>,
    i_tdt: &Tensor<S>,
    flow: &FlowField<S>,
    cfg: &LossConfig,
    events: Option<&[bool]>,
) -> Result<LossValue<S>> {
    let (h, w) = image_dims(i_t)?;
    let dims2 = image_dims(i_tdt)?;
    if (h, w) != dims2 || (h, w) != (flow.height(), flow.width()) {
        return Err(Error::shape("photometric_loss", &[h, w], &[flow.height(), flow.width()]));
    }
    let (i_t, i_tdt) = (as_plane(i_t)?, as_plane(i_tdt)?);
    let event_mask = if cfg.photometric_event_mask { events } else { None };
    if let Some(m) = event_mask {
        if m.len() != h * w {
            return Err(Error::shape("photometric_loss mask", &[h * w], &[m.len()]));
        }
    }
    let mask = interior_mask(h, w, event_mask);
    let count = mask.iter().filter(|&&m| m).count();
    let norm = if cfg.normalize { 1.0 / count.max(1) as f64 } else { 1.0 };

    let warped = bilinear_warp(&i_tdt, flow)?;
    let mut value = 0.0;
    let mut d_warped = Tensor::zeros(&[h, w]);
    for i in 0..h * w {
        if !mask[i] {
            continue;
        }
        let diff = (i_t.data()[i] - warped.data()[i]).to_f64_lossy();
        value += charbonnier_scalar(diff, cfg.r, cfg.eta);
        d_warped.data_mut()[i] = S::lit(-norm * charbonnier_derivative(diff, cfg.r, cfg.eta));
    }
    let grads = bilinear_warp_backward(&i_tdt, flow, &d_warped)?;
    Ok(LossValue {
        value: value * norm,
        grad: grads.flow,
    })
}

/// Sum of absolute horizontal and vertical neighbour differences of both
/// flow components.
pub fn smoothness_loss<S: Scalar>(flow: &FlowField<S>, cfg: &LossConfig) -> Result<LossValue<S>> {
    let (h, w) = (flow.height(), flow.width());
    if h < 2 || w < 2 {
        return Err(Error::shape("smoothness_loss", &[2, 2], &[h, w]));
    }
    let norm = if cfg.normalize { 1.0 / (h * w) as f64 } else { 1.0 };
    let mut grad = FlowField::zeros(h, w);
    let mut value = 0.0;
    let (gu, gv) = grad.planes_mut();
    for (plane, g) in [(flow.u(), gu), (flow.v(), gv)] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut visit = |j: usize| {
                    let d = (plane[j] - plane[i]).to_f64_lossy();
                    value += d.abs();
                    let s = if d > 0.0 {
                        norm
                    } else if d < 0.0 {
                        -norm
                    } else {
                        0.0
                    };
                    g[j] += S::lit(s);
                    g[i] -= S::lit(s);
                };
                if x + 1 < w {
                    visit(i + 1);
                }
                if y + 1 < h {
                    visit(i + w);
                }
            }
        }
    }
    Ok(LossValue { value: value * norm, grad })
}

#[derive(Debug, Clone)]
pub struct SslLoss<S> {
    pub total: f64,
    pub photometric: f64,
    pub smoothness: f64,
    pub grad: FlowField<S>,
}

/// `photometric + alpha * smoothness`.
pub fn total_ssl_loss<S: Scalar>(
    i_t: &Tensor<S>,
    i_tdt: &Tensor<S>,
    flow: &FlowField<S>,
    cfg: &LossConfig,
    events: Option<&[bool]>,
) -> Result<SslLoss<S>> {
    let photo = photometric_loss(i_t, i_tdt, flow, cfg, events)?;
    let smooth = smoothness_loss(flow, cfg)?;
    let mut grad = photo.grad.into_tensor();
    grad.axpy(S::lit(cfg.alpha), smooth.grad.tensor())?;
    Ok(SslLoss {
        total: photo.value + cfg.alpha * smooth.value,
        photometric: photo.value,
        smoothness: smooth.value,
        grad: FlowField::from_tensor(grad)?,
    })
}

/// Mean squared endpoint error over pixels whose ground truth is non-zero.
pub fn supervised_loss<S: Scalar>(pred: &FlowField<S>, gt: &FlowField<S>) -> Result<LossValue<S>> {
    pred.check_same_shape(gt, "supervised_loss")?;
    let valid: Vec<bool> = gt.u().iter().zip(gt.v()).map(|(u, v)| *u != S::zero() || *v != S::zero()).collect();
    let k = valid.iter().filter(|&&m| m).count();
    if k == 0 {
        return Err(Error::NoSupervisedPixels);
    }
    let kf = k as f64;
    let mut grad = FlowField::zeros(pred.height(), pred.width());
    let mut value = 0.0;
    {
        let (gu, gv) = grad.planes_mut();
        for (i, _) in valid.iter().enumerate().filter(|(_, m)| **m) {
            let du = (pred.u()[i] - gt.u()[i]).to_f64_lossy();
            let dv = (pred.v()[i] - gt.v()[i]).to_f64_lossy();
            value += du * du + dv * dv;
            gu[i] = S::lit(2.0 * du / kf);
            gv[i] = S::lit(2.0 * dv / kf);
        }
    }
    Ok(LossValue { value: value / kf, grad })
}

fn endpoint_errors<S: Scalar>(pred: &FlowField<S>, gt: &FlowField<S>, mask: &[bool]) -> Result<Vec<f64>> {
    pred.check_same_shape(gt, "endpoint_error")?;
    if mask.len() != pred.len() {
        return Err(Error::shape("endpoint_error mask", &[pred.len()], &[mask.len()]));
    }
    let errs: Vec<f64> = (0..pred.len())
        .filter(|&i| mask[i])
        .map(|i| {
            let du = (pred.u()[i] - gt.u()[i]).to_f64_lossy();
            let dv = (pred.v()[i] - gt.v()[i]).to_f64_lossy();
            du.hypot(dv)
        })
        .collect();
    if errs.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(errs)
}

/// Average endpoint error over masked pixels.
pub fn aee<S: Scalar>(pred: &FlowField<S>, gt: &FlowField<S>, mask: &[bool]) -> Result<f64> {
    let e = endpoint_errors(pred, gt, mask)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Percentage of masked pixels whose endpoint error exceeds `n` pixels.
pub fn npe<S: Scalar>(pred: &FlowField<S>, gt: &FlowField<S>, mask: &[bool], n: f64) -> Result<f64> {
    let e = endpoint_errors(pred, gt, mask)?;
    Ok(100.0 * e.iter().filter(|&&x| x > n).count() as f64 / e.len() as f64)
}

/// AEE and 1/2/3-pixel outlier percentages over one or more samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub aee: f64,
    pub pe1: f64,
    pub pe2: f64,
    pub pe3: f64,
    pub pixels: usize,
    pub samples: usize,
}

impl FlowMetrics {
    pub fn evaluate<S: Scalar>(pred: &FlowField<S>, gt: &FlowField<S>, mask: &[bool]) -> Result<Self> {
        let e = endpoint_errors(pred, gt, mask)?;
        let n = e.len() as f64;
        let pct = |k: f64| 100.0 * e.iter().filter(|&&x| x > k).count() as f64 / n;
        Ok(FlowMetrics {
            aee: e.iter().sum::<f64>() / n,
            pe1: pct(1.0),
            pe2: pct(2.0),
            pe3: pct(3.0),
            pixels: e.len(),
            samples: 1,
        })
    }

    /// Averages per-sample metrics with equal weight per sample.
    pub fn mean(items: &[FlowMetrics]) -> Self {
        let mut out = FlowMetrics::default();
        let total: usize = items.iter().map(|m| m.samples).sum();
        if total == 0 {
            return out;
        }
        for m in items {
            let w = m.samples as f64 / total as f64;
            out.aee += w * m.aee;
            out.pe1 += w * m.pe1;
            out.pe2 += w * m.pe2;
            out.pe3 += w * m.pe3;
            out.pixels += m.pixels;
        }
        out.samples = total;
        out
    }
}

impl fmt::Display for FlowMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "aee={:.6}", self.aee)?;
        writeln!(f, "1pe={:.4}", self.pe1)?;
        writeln!(f, "2pe={:.4}", self.pe2)?;
        writeln!(f, "3pe={:.4}", self.pe3)?;
        writeln!(f, "pixels={}", self.pixels)?;
        write!(f, "samples={}", self.samples)
    }
}
