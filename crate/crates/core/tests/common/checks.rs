//! Central finite differences and adjoint identities for the differentiable
//! primitives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeflow::objectives::{
    charbonnier, charbonnier_backward, photometric_loss, smoothness_loss, supervised_loss, total_ssl_loss, LossConfig,
};
use spikeflow::tensor::{
    add, add_backward, bilinear_warp, bilinear_warp_backward, concat_channels, concat_channels_backward, conv2d,
    conv2d_backward, crop, crop_backward, mul, mul_backward, relu, relu_backward, scale, scale_backward, tanh,
    tanh_backward, upsample_bilinear2x, upsample_bilinear2x_backward, ConvGeometry, Tensor,
};
use spikeflow::FlowField;

use super::oracle::rel_err;


/// Central-difference gradient of `f` at `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let hi = f(&probe);
            probe[i] = orig - eps;
            let lo = f(&probe);
            probe[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Uniform values whose magnitude is at least `gap`, for kinked functions.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

pub fn with_data(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

/// `<a, b>` for tensors.
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.dot(b).unwrap()
}

pub const FD_EPS: f64 = 1e-6;

/// Outcome of the finite-difference and inner-product checks of one
/// backward pass.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    /// Relative error of the analytic gradient against central differences.
    pub fd: f64,
    /// Relative error of `<J v, g>` against `<v, J^T g>` for a random `v`.
    pub adjoint: f64,
}

impl Check {
    pub fn worst(&self) -> f64 {
        self.fd.max(self.adjoint)
    }
}

/// `loss(x) = <F(x), g>` for a fixed cotangent `g`; `grad` is the analytic
/// `J^T g` at `x`.
pub fn check(name: &str, mut loss: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], seed: u64) -> Check {
    let fd = rel_err(grad, &fd_grad(&mut loss, x, FD_EPS));
    let mut r = rng(seed ^ 0xad10);
    let v: Vec<f64> = (0..x.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let shifted = |s: f64| x.iter().zip(&v).map(|(a, b)| a + s * b).collect::<Vec<f64>>();
    let jv_g = (loss(&shifted(FD_EPS)) - loss(&shifted(-FD_EPS))) / (2.0 * FD_EPS);
    let v_jtg: f64 = v.iter().zip(grad).map(|(a, b)| a * b).sum();
    let scale = jv_g.abs().max(v_jtg.abs());
    let adjoint = if scale == 0.0 { 0.0 } else { (jv_g - v_jtg).abs() / scale };
    Check {
        name: name.to_string(),
        fd,
        adjoint,
    }
}

fn fractional_flow(r: &mut ChaCha8Rng, h: usize, w: usize) -> FlowField<f64> {
    let mut f = || r.gen_range(-2i32..=2) as f64 + r.gen_range(0.1..0.9);
    let u = (0..h * w).map(|_| f()).collect();
    let v = (0..h * w).map(|_| f()).collect();
    FlowField::from_planes(h, w, u, v).unwrap()
}

fn flow_of(h: usize, w: usize, v: &[f64]) -> FlowField<f64> {
    FlowField::from_tensor(with_data(&[2, h, w], v)).unwrap()
}

fn conv_checks(out: &mut Vec<Check>, stride: usize, kernel: usize, seed: u64) {
    let mut r = rng(seed);
    let geom = ConvGeometry::new(stride, kernel / 2);
    let x = uniform(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let w = uniform(&mut r, &[4, 3, kernel, kernel], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    let g = uniform(&mut r, conv2d(&x, &w, Some(&b), geom).unwrap().shape(), -1.0, 1.0);
    let grads = conv2d_backward(&x, &w, &g, geom, true).unwrap();
    let loss = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&conv2d(x, w, Some(b), geom).unwrap(), &g);
    let tag = format!("conv{kernel}x{kernel}/s{stride}");
    out.push(check(&format!("{tag} input"), |v| loss(&with_data(x.shape(), v), &w, &b), x.data(), grads.input.unwrap().data(), seed));
    out.push(check(&format!("{tag} weight"), |v| loss(&x, &with_data(w.shape(), v), &b), w.data(), grads.weight.data(), seed + 1));
    out.push(check(&format!("{tag} bias"), |v| loss(&x, &w, &with_data(b.shape(), v)), b.data(), grads.bias.data(), seed + 2));
}

/// Every differentiable primitive with its hand-written backward pass.
pub fn primitive_suite() -> Vec<Check> {
    let mut out = Vec::new();
    conv_checks(&mut out, 1, 3, 1);
    conv_checks(&mut out, 2, 3, 2);
    conv_checks(&mut out, 1, 1, 3);

    let mut r = rng(10);
    let x = uniform(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
    let g = uniform(&mut r, &[1, 2, 6, 8], -1.0, 1.0);
    let gx = upsample_bilinear2x_backward(&g).unwrap();
    out.push(check("upsample2x", |v| dot(&upsample_bilinear2x(&with_data(x.shape(), v)).unwrap(), &g), x.data(), gx.data(), 10));

    let (h, w) = (7, 9);
    let img = uniform(&mut r, &[h, w], 0.0, 1.0);
    let flow = fractional_flow(&mut r, h, w);
    let g = uniform(&mut r, &[h, w], -1.0, 1.0);
    let wg = bilinear_warp_backward(&img, &flow, &g).unwrap();
    out.push(check("warp image", |v| dot(&bilinear_warp(&with_data(&[h, w], v), &flow).unwrap(), &g), img.data(), wg.image.data(), 11));
    out.push(check(
        "warp flow",
        |v| dot(&bilinear_warp(&img, &flow_of(h, w, v)).unwrap(), &g),
        flow.tensor().data(),
        wg.flow.tensor().data(),
        12,
    ));

    let shape = [1, 2, 3, 3];
    let a = uniform(&mut r, &shape, -2.0, 2.0);
    let b = uniform(&mut r, &shape, -2.0, 2.0);
    let g = uniform(&mut r, &shape, -1.0, 1.0);
    let (ga, gb) = add_backward(&g);
    out.push(check("add a", |v| dot(&add(&with_data(&shape, v), &b).unwrap(), &g), a.data(), ga.data(), 13));
    out.push(check("add b", |v| dot(&add(&a, &with_data(&shape, v)).unwrap(), &g), b.data(), gb.data(), 14));
    let (ma, mb) = mul_backward(&a, &b, &g).unwrap();
    out.push(check("mul a", |v| dot(&mul(&with_data(&shape, v), &b).unwrap(), &g), a.data(), ma.data(), 15));
    out.push(check("mul b", |v| dot(&mul(&a, &with_data(&shape, v)).unwrap(), &g), b.data(), mb.data(), 16));
    let t = tanh_backward(&tanh(&a), &g).unwrap();
    out.push(check("tanh", |v| dot(&tanh(&with_data(&shape, v)), &g), a.data(), t.data(), 17));
    let s = scale_backward(&g, 3.5);
    out.push(check("scale", |v| dot(&scale(&with_data(&shape, v), 3.5), &g), a.data(), s.data(), 18));
    let xr = away_from_zero(&mut r, &shape, 2.0, 0.05);
    let rl = relu_backward(&relu(&xr), &g).unwrap();
    out.push(check("relu", |v| dot(&relu(&with_data(&shape, v)), &g), xr.data(), rl.data(), 19));

    let ca = uniform(&mut r, &[1, 2, 3, 4], -1.0, 1.0);
    let cb = uniform(&mut r, &[1, 3, 3, 4], -1.0, 1.0);
    let g = uniform(&mut r, &[1, 5, 3, 4], -1.0, 1.0);
    let parts = concat_channels_backward(&g, &[2, 3]).unwrap();
    out.push(check("concat a", |v| dot(&concat_channels(&[&with_data(ca.shape(), v), &cb]).unwrap(), &g), ca.data(), parts[0].data(), 20));
    out.push(check("concat b", |v| dot(&concat_channels(&[&ca, &with_data(cb.shape(), v)]).unwrap(), &g), cb.data(), parts[1].data(), 21));

    let xc = uniform(&mut r, &[1, 2, 6, 7], -1.0, 1.0);
    let g = uniform(&mut r, &[1, 2, 4, 3], -1.0, 1.0);
    let gc = crop_backward(&g, xc.shape(), 1, 2).unwrap();
    out.push(check("crop", |v| dot(&crop(&with_data(xc.shape(), v), 1, 2, 4, 3).unwrap(), &g), xc.data(), gc.data(), 22));

    let xs = uniform(&mut r, &[3, 5], -2.0, 2.0);
    let g = uniform(&mut r, &[3, 5], -1.0, 1.0);
    let gch = charbonnier_backward(&xs, &g, 0.45, 1e-3).unwrap();
    out.push(check("charbonnier", |v| dot(&charbonnier(&with_data(xs.shape(), v), 0.45, 1e-3), &g), xs.data(), gch.data(), 23));

    let (h, w) = (8, 8);
    let i0 = uniform(&mut r, &[h, w], 0.0, 1.0);
    let i1 = uniform(&mut r, &[h, w], 0.0, 1.0);
    let flow = fractional_flow(&mut r, h, w);
    let cfg = LossConfig::default();
    let lv = photometric_loss(&i0, &i1, &flow, &cfg, None).unwrap();
    out.push(check(
        "photometric loss",
        |v| photometric_loss(&i0, &i1, &flow_of(h, w, v), &cfg, None).unwrap().value,
        flow.tensor().data(),
        lv.grad.tensor().data(),
        24,
    ));
    let lv = total_ssl_loss(&i0, &i1, &flow, &cfg, None).unwrap();
    out.push(check(
        "ssl loss",
        |v| total_ssl_loss(&i0, &i1, &flow_of(h, w, v), &cfg, None).unwrap().total,
        flow.tensor().data(),
        lv.grad.tensor().data(),
        25,
    ));

    // Distinct values spaced far apart relative to the step keep the
    // absolute differences away from their kinks.
    let (h, w) = (5, 6);
    let mut vals: Vec<f64> = (0..2 * h * w).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(&mut r);
    let cfg = LossConfig::default();
    let lv = smoothness_loss(&flow_of(h, w, &vals), &cfg).unwrap();
    out.push(check("smoothness loss", |v| smoothness_loss(&flow_of(h, w, v), &cfg).unwrap().value, &vals, lv.grad.tensor().data(), 26));

    let pred = uniform(&mut r, &[2, 5, 5], -3.0, 3.0);
    let mut gt = FlowField::from_tensor(uniform(&mut r, &[2, 5, 5], -3.0, 3.0)).unwrap();
    gt.u_mut()[3] = 0.0;
    gt.v_mut()[3] = 0.0;
    let lv = supervised_loss(&flow_of(5, 5, pred.data()), &gt).unwrap();
    out.push(check("supervised loss", |v| supervised_loss(&flow_of(5, 5, v), &gt).unwrap().value, pred.data(), lv.grad.tensor().data(), 27));
    out
}
