//! Scalar reverse-mode tape: an independent chain-rule oracle over fully
//! unrolled graphs.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct V(pub usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    /// Heaviside forward, surrogate `1 / (1 + gamma z^2)` on `|z| < 1` backward.
    Spike(usize),
}

pub struct Tape {
    vals: Vec<f64>,
    ops: Vec<Op>,
    gamma: f64,
}

impl Tape {
    pub fn new(gamma: f64) -> Self {
        Tape {
            vals: Vec::new(),
            ops: Vec::new(),
            gamma,
        }
    }

    fn push(&mut self, v: f64, op: Op) -> V {
        self.vals.push(v);
        self.ops.push(op);
        V(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn val(&self, a: V) -> f64 {
        self.vals[a.0]
    }

    pub fn leaf(&mut self, v: f64) -> V {
        self.push(v, Op::Leaf)
    }

    /// A copy of `a`'s value that blocks gradient flow.
    pub fn detach(&mut self, a: V) -> V {
        let v = self.val(a);
        self.leaf(v)
    }

    pub fn add(&mut self, a: V, b: V) -> V {
        let v = self.val(a) + self.val(b);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: V, b: V) -> V {
        let v = self.val(a) - self.val(b);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: V, b: V) -> V {
        let v = self.val(a) * self.val(b);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: V, b: V) -> V {
        let v = self.val(a) / self.val(b);
        self.push(v, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: V, k: f64) -> V {
        let v = self.val(a) * k;
        self.push(v, Op::Scale(a.0, k))
    }

    pub fn tanh(&mut self, a: V) -> V {
        let v = self.val(a).tanh();
        self.push(v, Op::Tanh(a.0))
    }

    pub fn spike(&mut self, z: V) -> V {
        let v = if self.val(z) > 0.0 { 1.0 } else { 0.0 };
        self.push(v, Op::Spike(z.0))
    }

    pub fn sum(&mut self, xs: &[V]) -> V {
        let mut it = xs.iter();
        let first = *it.next().expect("non-empty sum");
        it.fold(first, |acc, &x| self.add(acc, x))
    }

    /// Gradient of `out` with respect to every node.
    pub fn grad(&self, out: V) -> Vec<f64> {
        let mut g = vec![0.0; self.vals.len()];
        g[out.0] = 1.0;
        for i in (0..=out.0).rev() {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    g[a] += gi;
                    g[b] += gi;
                }
                Op::Sub(a, b) => {
                    g[a] += gi;
                    g[b] -= gi;
                }
                Op::Mul(a, b) => {
                    g[a] += gi * self.vals[b];
                    g[b] += gi * self.vals[a];
                }
                Op::Div(a, b) => {
                    let vb = self.vals[b];
                    g[a] += gi / vb;
                    g[b] -= gi * self.vals[a] / (vb * vb);
                }
                Op::Scale(a, k) => g[a] += gi * k,
                Op::Tanh(a) => {
                    let y = self.vals[i];
                    g[a] += gi * (1.0 - y * y);
                }
                Op::Spike(z) => {
                    let zv = self.vals[z];
                    if zv.abs() < 1.0 {
                        g[z] += gi / (1.0 + self.gamma * zv * zv);
                    }
                }
            }
        }
        g
    }
}

/// A `[c, h, w]` feature map of tape nodes.
#[derive(Debug, Clone)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<V>,
}

impl Map {
    pub fn at(&self, c: usize, y: usize, x: usize) -> V {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn leaves(tape: &mut Tape, c: usize, h: usize, w: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), c * h * w);
        Map {
            c,
            h,
            w,
            v: data.iter().map(|&x| tape.leaf(x)).collect(),
        }
    }

    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        self.v.iter().map(|&x| tape.val(x)).collect()
    }
}

/// Direct-loop convolution with zero padding.
pub fn conv(tape: &mut Tape, x: &Map, weight: &[V], bias: &[V], out_c: usize, k: usize, stride: usize, pad: usize) -> Map {
    assert_eq!(weight.len(), out_c * x.c * k * k);
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut v = Vec::with_capacity(out_c * oh * ow);
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut terms = vec![bias[o]];
                for ci in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            let wv = weight[((o * x.c + ci) * k + ky) * k + kx];
                            let xv = x.at(ci, iy as usize, ix as usize);
                            terms.push(tape.mul(wv, xv));
                        }
                    }
                }
                v.push(tape.sum(&terms));
            }
        }
    }
    Map { c: out_c, h: oh, w: ow, v }
}

pub fn add(tape: &mut Tape, a: &Map, b: &Map) -> Map {
    assert_eq!((a.c, a.h, a.w), (b.c, b.h, b.w));
    Map {
        v: a.v.iter().zip(&b.v).map(|(&x, &y)| tape.add(x, y)).collect(),
        ..a.clone()
    }
}

pub fn concat(parts: &[&Map]) -> Map {
    let (h, w) = (parts[0].h, parts[0].w);
    Map {
        c: parts.iter().map(|p| p.c).sum(),
        h,
        w,
        v: parts.iter().flat_map(|p| p.v.iter().copied()).collect(),
    }
}

/// Bilinear 2x upsampling with half-pixel sample centres and edge clamping.
pub fn upsample2x(tape: &mut Tape, x: &Map) -> Map {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let coord = |o: usize, len: usize| {
        let s = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        (i0, (i0 + 1).min(len - 1), s - i0 as f64)
    };
    let mut v = Vec::with_capacity(x.c * oh * ow);
    for c in 0..x.c {
        for oy in 0..oh {
            let (y0, y1, fy) = coord(oy, x.h);
            for ox in 0..ow {
                let (x0, x1, fx) = coord(ox, x.w);
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let terms: Vec<V> = corners.iter().map(|&(yy, xx, wt)| tape.scale(x.at(c, yy, xx), wt)).collect();
                v.push(tape.sum(&terms));
            }
        }
    }
    Map { c: x.c, h: oh, w: ow, v }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reset {
    Soft,
    Hard,
}

/// One LIF layer unrolled on the tape. The previous spike enters the reset
/// term detached.
pub struct Lif {
    pub v_th: V,
    pub leak: V,
    pub reset: Reset,
    u: Option<Vec<V>>,
    o: Option<Vec<V>>,
    pub spikes: f64,
}

impl Lif {
    pub fn new(v_th: V, leak: V, reset: Reset) -> Self {
        Lif {
            v_th,
            leak,
            reset,
            u: None,
            o: None,
            spikes: 0.0,
        }
    }

    pub fn step(&mut self, tape: &mut Tape, current: &Map) -> Map {
        let n = current.v.len();
        let one = tape.leaf(1.0);
        let mut u_new = Vec::with_capacity(n);
        let mut o_new = Vec::with_capacity(n);
        for i in 0..n {
            let u = match (&self.u, &self.o) {
                (Some(u), Some(o)) => {
                    let decayed = tape.mul(self.leak, u[i]);
                    let o_prev = tape.detach(o[i]);
                    match self.reset {
                        Reset::Soft => {
                            let integrated = tape.add(decayed, current.v[i]);
                            let r = tape.mul(self.v_th, o_prev);
                            tape.sub(integrated, r)
                        }
                        Reset::Hard => {
                            let keep = tape.sub(one, o_prev);
                            let kept = tape.mul(decayed, keep);
                            tape.add(kept, current.v[i])
                        }
                    }
                }
                _ => current.v[i],
            };
            let ratio = tape.div(u, self.v_th);
            let z = tape.sub(ratio, one);
            let o = tape.spike(z);
            self.spikes += tape.val(o);
            u_new.push(u);
            o_new.push(o);
        }
        self.u = Some(u_new);
        self.o = Some(o_new.clone());
        Map { v: o_new, ..current.clone() }
    }
}
