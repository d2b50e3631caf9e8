//! Unrolled-graph gradient oracles for the spiking layers and networks.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikeflow::model::{Kind, Network};
use spikeflow::snn::{lif_step, LifBackward, LifConfig, LifParams, LifState, ResetMode};
use spikeflow::tensor::{conv2d, conv2d_backward, ConvGeometry, Tensor};
use spikeflow::FlowField;

use super::tape::{self, Lif, Map, Reset, Tape, V};

/// Relative error of two gradient vectors: `|a - b| / max(|a|, |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// conv(2 -> 3, 3x3) -> LIF -> conv(3 -> 2, 3x3) -> LIF on a 4x4 grid:
/// 80 spiking neurons.
pub struct TwoLayerNet {
    pub w1: Tensor<f64>,
    pub b1: Tensor<f64>,
    pub w2: Tensor<f64>,
    pub b2: Tensor<f64>,
    pub p1: LifParams<f64>,
    pub p2: LifParams<f64>,
    pub config: LifConfig,
    pub inputs: Vec<Tensor<f64>>,
    /// Loss is `sum_t <readout, o2[t]>`.
    pub readout: Tensor<f64>,
}

/// Gradients in the order w1, b1, w2, b2, v_th1, leak1, v_th2, leak2.
pub struct TwoLayerGrads {
    pub named: Vec<(&'static str, Vec<f64>)>,
    pub spikes: [f64; 2],
}

impl TwoLayerNet {
    pub const NEURONS: usize = 3 * 16 + 2 * 16;

    pub fn random(seed: u64, timesteps: usize, reset: ResetMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, random(&mut rng, n, lo, hi)).unwrap()
        };
        let w1 = t(&[3, 2, 3, 3], -0.3, 0.6);
        let b1 = t(&[3], -0.1, 0.2);
        let w2 = t(&[2, 3, 3, 3], -0.3, 0.6);
        let b2 = t(&[2], -0.1, 0.2);
        let inputs = (0..timesteps).map(|_| t(&[1, 2, 4, 4], 0.0, 1.5)).collect();
        let readout = t(&[1, 2, 4, 4], -1.0, 1.0);
        TwoLayerNet {
            w1,
            b1,
            w2,
            b2,
            p1: LifParams::new(1.3, 0.85),
            p2: LifParams::new(1.1, 0.9),
            config: LifConfig { gamma: 10.0, reset },
            inputs,
            readout,
        }
    }

    /// Gradients from the per-layer backward implementation.
    pub fn implementation(&self) -> TwoLayerGrads {
        let geom = ConvGeometry::new(1, 1);
        let mut s1 = LifState::zeros(&[1, 3, 4, 4]);
        let mut s2 = LifState::zeros(&[1, 2, 4, 4]);
        let mut recs1 = Vec::new();
        let mut recs2 = Vec::new();
        let mut spikes = [0.0; 2];
        for x in &self.inputs {
            let i1 = conv2d(x, &self.w1, Some(&self.b1), geom).unwrap();
            let r1 = lif_step(&mut s1, &i1, &self.p1, self.config.reset).unwrap();
            let i2 = conv2d(&r1.o, &self.w2, Some(&self.b2), geom).unwrap();
            let r2 = lif_step(&mut s2, &i2, &self.p2, self.config.reset).unwrap();
            spikes[0] += r1.o.sum();
            spikes[1] += r2.o.sum();
            recs1.push(r1);
            recs2.push(r2);
        }
        let mut back1 = LifBackward::new(self.config);
        let mut back2 = LifBackward::new(self.config);
        let mut dw1 = Tensor::zeros(self.w1.shape());
        let mut db1 = Tensor::zeros(self.b1.shape());
        let mut dw2 = Tensor::zeros(self.w2.shape());
        let mut db2 = Tensor::zeros(self.b2.shape());
        for t in (0..self.inputs.len()).rev() {
            let di2 = back2.step(&recs2[t], Some(&self.readout), &self.p2);
            let g2 = conv2d_backward(&recs1[t].o, &self.w2, &di2, geom, true).unwrap();
            dw2.add_assign(&g2.weight).unwrap();
            db2.add_assign(&g2.bias).unwrap();
            let di1 = back1.step(&recs1[t], g2.input.as_ref(), &self.p1);
            let g1 = conv2d_backward(&self.inputs[t], &self.w1, &di1, geom, false).unwrap();
            dw1.add_assign(&g1.weight).unwrap();
            db1.add_assign(&g1.bias).unwrap();
        }
        TwoLayerGrads {
            named: vec![
                ("w1", dw1.into_data()),
                ("b1", db1.into_data()),
                ("w2", dw2.into_data()),
                ("b2", db2.into_data()),
                ("v_th1", vec![back1.d_v_th]),
                ("leak1", vec![back1.d_leak]),
                ("v_th2", vec![back2.d_v_th]),
                ("leak2", vec![back2.d_leak]),
            ],
            spikes,
        }
    }

    /// Gradients from the scalar tape over the unrolled graph.
    pub fn oracle(&self) -> TwoLayerGrads {
        let mut tp = Tape::new(self.config.gamma);
        let leaves = |tp: &mut Tape, t: &Tensor<f64>| t.data().iter().map(|&x| tp.leaf(x)).collect::<Vec<V>>();
        let w1 = leaves(&mut tp, &self.w1);
        let b1 = leaves(&mut tp, &self.b1);
        let w2 = leaves(&mut tp, &self.w2);
        let b2 = leaves(&mut tp, &self.b2);
        let reset = match self.config.reset {
            ResetMode::Soft => Reset::Soft,
            ResetMode::Hard => Reset::Hard,
        };
        let (vt1, lk1) = (tp.leaf(self.p1.v_th), tp.leaf(self.p1.leak));
        let (vt2, lk2) = (tp.leaf(self.p2.v_th), tp.leaf(self.p2.leak));
        let mut l1 = Lif::new(vt1, lk1, reset);
        let mut l2 = Lif::new(vt2, lk2, reset);
        let mut terms = Vec::new();
        for x in &self.inputs {
            let xm = Map::leaves(&mut tp, 2, 4, 4, x.data());
            let i1 = tape::conv(&mut tp, &xm, &w1, &b1, 3, 3, 1, 1);
            let o1 = l1.step(&mut tp, &i1);
            let i2 = tape::conv(&mut tp, &o1, &w2, &b2, 2, 3, 1, 1);
            let o2 = l2.step(&mut tp, &i2);
            for (&o, &c) in o2.v.iter().zip(self.readout.data()) {
                let k = tp.leaf(c);
                terms.push(tp.mul(o, k));
            }
        }
        let loss = tp.sum(&terms);
        let g = tp.grad(loss);
        let pick = |vs: &[V]| vs.iter().map(|v| g[v.0]).collect::<Vec<f64>>();
        TwoLayerGrads {
            named: vec![
                ("w1", pick(&w1)),
                ("b1", pick(&b1)),
                ("w2", pick(&w2)),
                ("b2", pick(&b2)),
                ("v_th1", vec![g[vt1.0]]),
                ("leak1", vec![g[lk1.0]]),
                ("v_th2", vec![g[vt2.0]]),
                ("leak2", vec![g[lk2.0]]),
            ],
            spikes: [l1.spikes, l2.spikes],
        }
    }
}

/// Loss `<d_flow, flow> + sum_s <d_acc[s], acc[s]>` over a whole network,
/// differentiated by the implementation and by the tape mirror.
#[derive(Clone)]
pub struct NetworkCase<'a> {
    pub net: &'a Network<f64>,
    pub frames: Vec<Tensor<f64>>,
    pub d_flow: FlowField<f64>,
    /// Extra weights on the coarser accumulators (all heads but the last).
    pub d_coarse: Vec<Tensor<f64>>,
}

pub struct NetworkGrads {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub spikes: Vec<f64>,
}

impl NetworkCase<'_> {
    pub fn implementation(&self) -> NetworkGrads {
        let out = self.net.run(&self.frames, true).unwrap();
        let n = out.accumulators.len();
        let mut d_acc: Vec<Option<Tensor<f64>>> = self.d_coarse.iter().cloned().map(Some).collect();
        d_acc.push(Some(self.net.accumulator_grad(&out.accumulators[n - 1], &self.d_flow).unwrap()));
        let grads = self.net.backward(out.trace.as_ref().unwrap(), &d_acc).unwrap();
        let mut loss = out.flow.tensor().dot(self.d_flow.tensor()).unwrap();
        for (a, d) in out.accumulators.iter().zip(&self.d_coarse) {
            loss += a.dot(d).unwrap();
        }
        NetworkGrads {
            loss,
            grads: grads.into_iter().map(Tensor::into_data).collect(),
            spikes: out.activity.lif_spikes.clone(),
        }
    }

    pub fn oracle(&self) -> NetworkGrads {
        let net = self.net;
        let spec = net.spec();
        let mut tp = Tape::new(spec.lif.gamma);
        let mut params: HashMap<String, Vec<V>> = HashMap::new();
        let mut order = Vec::new();
        for (name, p) in net.param_names().iter().zip(net.params()) {
            let vs: Vec<V> = p.value.data().iter().map(|&x| tp.leaf(x)).collect();
            order.push(vs.clone());
            params.insert(name.clone(), vs);
        }
        let reset = match spec.lif.reset {
            ResetMode::Soft => Reset::Soft,
            ResetMode::Hard => Reset::Hard,
        };
        let mut lifs: Vec<Lif> = (0..net.lif_layers().len())
            .map(|i| Lif::new(params[&format!("layer{i}.v_th")][0], params[&format!("layer{i}.leak")][0], reset))
            .collect();
        let out_channels = |name: &str| net.conv_layers().iter().find(|c| c.name == name).unwrap().out_channels;
        let mut accs: Vec<Option<Vec<V>>> = Vec::new();
        for frame in &self.frames {
            let [_, c, h, w] = frame.shape() else { panic!("rank-4 frame") };
            let x = Map::leaves(&mut tp, *c, *h, *w, frame.data());
            let conv = |tp: &mut Tape, name: &str, src: &Map, k: usize, stride: usize| {
                let pad = k / 2;
                tape::conv(tp, src, &params[&format!("{name}.weight")], &params[&format!("{name}.bias")], out_channels(name), k, stride, pad)
            };
            let heads: Vec<Map> = match spec.kind {
                Kind::UNet => {
                    let mut li = 0;
                    let mut act = |tp: &mut Tape, m: &Map| {
                        let o = lifs[li].step(tp, m);
                        li += 1;
                        o
                    };
                    let c1 = conv(&mut tp, "enc1", &x, 3, 2);
                    let e1 = act(&mut tp, &c1);
                    let c2 = conv(&mut tp, "enc2", &e1, 3, 2);
                    let e2 = act(&mut tp, &c2);
                    let c3 = conv(&mut tp, "enc3", &e2, 3, 2);
                    let e3 = act(&mut tp, &c3);
                    let c4 = conv(&mut tp, "enc4", &e3, 3, 2);
                    let e4 = act(&mut tp, &c4);
                    let mut r = e4;
                    for block in ["res1", "res2"] {
                        let ca = conv(&mut tp, &format!("{block}a"), &r, 3, 1);
                        let a = act(&mut tp, &ca);
                        let cb = conv(&mut tp, &format!("{block}b"), &a, 3, 1);
                        let sum = tape::add(&mut tp, &cb, &r);
                        r = act(&mut tp, &sum);
                    }
                    let up = tape::upsample2x(&mut tp, &r);
                    let cat = tape::concat(&[&up, &e3]);
                    let cd = conv(&mut tp, "dec1", &cat, 3, 1);
                    let mut d = act(&mut tp, &cd);
                    let mut f = conv(&mut tp, "flow1", &d, 1, 1);
                    let mut heads = vec![f.clone()];
                    for (stage, skip) in [(2, Some(&e2)), (3, Some(&e1)), (4, None)] {
                        let up = tape::upsample2x(&mut tp, &d);
                        let upf = tape::upsample2x(&mut tp, &f);
                        let cat = match skip {
                            Some(s) => tape::concat(&[&up, s, &upf]),
                            None => tape::concat(&[&up, &upf]),
                        };
                        let cd = conv(&mut tp, &format!("dec{stage}"), &cat, 3, 1);
                        d = act(&mut tp, &cd);
                        f = conv(&mut tp, &format!("flow{stage}"), &d, 1, 1);
                        heads.push(f.clone());
                    }
                    heads
                }
                Kind::FireNet => {
                    let mut li = 0;
                    let mut act = |tp: &mut Tape, m: &Map| {
                        let o = lifs[li].step(tp, m);
                        li += 1;
                        o
                    };
                    let c0 = conv(&mut tp, "head", &x, 3, 1);
                    let h0 = act(&mut tp, &c0);
                    let c1 = conv(&mut tp, "g1", &h0, 3, 1);
                    let mut r = act(&mut tp, &c1);
                    for (block, gate) in [("r1", Some("g2")), ("r2", None)] {
                        let ca = conv(&mut tp, &format!("{block}a"), &r, 3, 1);
                        let a = act(&mut tp, &ca);
                        let cb = conv(&mut tp, &format!("{block}b"), &a, 3, 1);
                        let sum = tape::add(&mut tp, &cb, &r);
                        r = act(&mut tp, &sum);
                        if let Some(g) = gate {
                            let cg = conv(&mut tp, g, &r, 3, 1);
                            r = act(&mut tp, &cg);
                        }
                    }
                    vec![conv(&mut tp, "pred", &r, 1, 1)]
                }
            };
            if accs.is_empty() {
                accs = vec![None; heads.len()];
            }
            for (acc, head) in accs.iter_mut().zip(heads) {
                *acc = Some(match acc.take() {
                    None => head.v,
                    Some(prev) => prev.iter().zip(&head.v).map(|(&a, &b)| tp.add(a, b)).collect(),
                });
            }
        }
        let accs: Vec<Vec<V>> = accs.into_iter().map(Option::unwrap).collect();
        let mut terms = Vec::new();
        let last = accs.last().unwrap();
        for (&a, &d) in last.iter().zip(self.d_flow.tensor().data()) {
            let th = tp.tanh(a);
            let f = tp.scale(th, spec.flow_scale);
            let k = tp.leaf(d);
            terms.push(tp.mul(f, k));
        }
        for (acc, d) in accs.iter().zip(&self.d_coarse) {
            for (&a, &dv) in acc.iter().zip(d.data()) {
                let k = tp.leaf(dv);
                terms.push(tp.mul(a, k));
            }
        }
        let loss = tp.sum(&terms);
        let g = tp.grad(loss);
        NetworkGrads {
            loss: tp.val(loss),
            grads: order.iter().map(|vs| vs.iter().map(|v| g[v.0]).collect()).collect(),
            spikes: lifs.iter().map(|l| l.spikes).collect(),
        }
    }
}

/// A network case with random frames and loss weights.
pub fn random_case(net: &Network<f64>, height: usize, width: usize, timesteps: usize, seed: u64) -> NetworkCase<'_> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = net.spec().input_channels();
    let frames = (0..timesteps)
        .map(|_| {
            Tensor::from_fn(&[1, c, height, width], |_| {
                if rng.gen::<f64>() < 0.5 {
                    rng.gen_range(0.0..2.0)
                } else {
                    0.0
                }
            })
        })
        .collect();
    let probe = net.run(&[Tensor::zeros(&[1, c, height, width])], false).unwrap();
    let n = probe.accumulators.len();
    let d_coarse = probe.accumulators[..n - 1]
        .iter()
        .map(|a| Tensor::from_fn(a.shape(), |_| rng.gen_range(-1.0..1.0)))
        .collect();
    let d_flow = FlowField::from_tensor(Tensor::from_fn(&[2, height, width], |_| rng.gen_range(-1.0..1.0))).unwrap();
    NetworkCase {
        net,
        frames,
        d_flow,
        d_coarse,
    }
}
