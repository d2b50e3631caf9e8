//! Spiking and analog U-Net / FireNet flow models.
//!
//! A network is a static per-timestep graph of convolution, neuron,
//! upsampling, concatenation and addition nodes. Spiking models replay the
//! graph once per timestep with persistent membrane state; analog models run
//! it once with all event bins stacked as input channels. Flow-head outputs
//! are summed over timesteps and squashed with `flow_scale * tanh(.)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{EventVolume, GroupedInput};
use crate::flow::FlowField;
use crate::snn::{lif_step, LifBackward, LifConfig, LifParams, LifState, ResetMode, StepRecord};
use crate::tensor::{
    concat_channels, concat_channels_backward, conv2d, conv2d_backward, relu, relu_backward, upsample_bilinear2x,
    upsample_bilinear2x_backward, ConvGeometry, Parameter, Scalar, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    UNet,
    FireNet,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::UNet => "unet",
            Kind::FireNet => "firenet",
        }
    }
}

impl FromStr for Kind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Kind::UNet),
            "firenet" => Ok(Kind::FireNet),
            _ => Err(Error::Config(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neuron {
    Spiking,
    Analog,
}

impl Neuron {
    pub fn name(self) -> &'static str {
        match self {
            Neuron::Spiking => "spiking",
            Neuron::Analog => "analog",
        }
    }
}

impl FromStr for Neuron {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spiking" => Ok(Neuron::Spiking),
            "analog" => Ok(Neuron::Analog),
            _ => Err(Error::Config(format!("unknown neuron type {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: Kind,
    /// U-Net base width `b`; the encoder ladder is `b, 2b, 4b, 8b`.
    pub base_channels: usize,
    pub neuron: Neuron,
    /// Spiking timesteps `T`; the event volume has `2T` bins.
    pub timesteps: usize,
    /// Maximum flow magnitude in pixels.
    pub flow_scale: f64,
    pub lif: LifConfig,
    pub init_threshold: f64,
    pub init_leak: f64,
}

impl ModelSpec {
    pub fn unet(base_channels: usize, neuron: Neuron) -> Self {
        ModelSpec {
            kind: Kind::UNet,
            base_channels,
            neuron,
            timesteps: 5,
            flow_scale: 40.0,
            lif: LifConfig::default(),
            init_threshold: 1.0,
            init_leak: 1.0,
        }
    }

    pub fn firenet(neuron: Neuron) -> Self {
        ModelSpec {
            kind: Kind::FireNet,
            base_channels: 32,
            ..Self::unet(32, neuron)
        }
    }

    /// Named presets: base, mini, micro, nano, pico (U-Net) and fire.
    pub fn preset(name: &str, neuron: Neuron) -> Result<Self> {
        let b = match name {
            "base" => 64,
            "mini" => 32,
            "micro" => 16,
            "nano" => 8,
            "pico" => 4,
            "fire" => return Ok(Self::firenet(neuron)),
            _ => return Err(Error::Config(format!("unknown preset {name:?}"))),
        };
        Ok(Self::unet(b, neuron))
    }

    pub fn bins(&self) -> usize {
        2 * self.timesteps
    }

    pub fn input_channels(&self) -> usize {
        match self.neuron {
            Neuron::Spiking => 4,
            Neuron::Analog => 2 * self.bins(),
        }
    }

    /// Required divisor of the input height and width.
    pub fn spatial_multiple(&self) -> usize {
        match self.kind {
            Kind::UNet => 16,
            Kind::FireNet => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.timesteps == 0 {
            return Err(Error::Config("base_channels and timesteps must be positive".into()));
        }
        if self.kind == Kind::UNet && self.base_channels < 2 {
            return Err(Error::Config("unet base_channels must be >= 2".into()));
        }
        if !(self.flow_scale > 0.0) || !(self.lif.gamma > 0.0) {
            return Err(Error::Config("flow_scale and surrogate gamma must be positive".into()));
        }
        if !(self.init_threshold > 0.0) || !(self.init_leak > 0.0 && self.init_leak <= 1.0) {
            return Err(Error::Config("init threshold must be > 0 and leak in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model.kind".into(), self.kind.name().into());
        m.insert("model.base_channels".into(), self.base_channels.to_string());
        m.insert("model.neuron".into(), self.neuron.name().into());
        m.insert("model.timesteps".into(), self.timesteps.to_string());
        m.insert("model.flow_scale".into(), fmt_f64(self.flow_scale));
        m.insert("model.surrogate_gamma".into(), fmt_f64(self.lif.gamma));
        m.insert("model.reset".into(), self.lif.reset.name().into());
        m.insert("model.init_threshold".into(), fmt_f64(self.init_threshold));
        m.insert("model.init_leak".into(), fmt_f64(self.init_leak));
        m
    }

    /// Reads `model.*` keys; missing keys keep the U-Net defaults.
    pub fn from_manifest(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).map(String::as_str);
        let parse_f = |k: &str, default: f64| -> Result<f64> {
            get(k).map_or(Ok(default), |v| v.parse().map_err(|_| Error::Config(format!("{k}: bad number {v:?}"))))
        };
        let parse_u = |k: &str, default: usize| -> Result<usize> {
            get(k).map_or(Ok(default), |v| v.parse().map_err(|_| Error::Config(format!("{k}: bad integer {v:?}"))))
        };
        let kind: Kind = get("model.kind").unwrap_or("unet").parse()?;
        let neuron: Neuron = get("model.neuron").unwrap_or("spiking").parse()?;
        let mut spec = match kind {
            Kind::UNet => ModelSpec::unet(8, neuron),
            Kind::FireNet => ModelSpec::firenet(neuron),
        };
        spec.base_channels = parse_u("model.base_channels", spec.base_channels)?;
        spec.timesteps = parse_u("model.timesteps", spec.timesteps)?;
        spec.flow_scale = parse_f("model.flow_scale", spec.flow_scale)?;
        spec.lif.gamma = parse_f("model.surrogate_gamma", spec.lif.gamma)?;
        if let Some(r) = get("model.reset") {
            spec.lif.reset = ResetMode::parse(r).ok_or_else(|| Error::Config(format!("model.reset: {r:?}")))?;
        }
        spec.init_threshold = parse_f("model.init_threshold", spec.init_threshold)?;
        spec.init_leak = parse_f("model.init_leak", spec.init_leak)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvRole {
    Hidden,
    /// Two-channel flow prediction; its output is accumulated over timesteps.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub geom: ConvGeometry,
    pub role: ConvRole,
    weight: usize,
    bias: usize,
}

impl ConvLayer {
    pub fn weight_index(&self) -> usize {
        self.weight
    }

    pub fn bias_index(&self) -> usize {
        self.bias
    }

    /// Synaptic connections per output neuron.
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifLayer {
    pub name: String,
    v_th: usize,
    leak: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Input,
    Conv { layer: usize, src: usize },
    Lif { layer: usize, src: usize },
    Relu { src: usize },
    Add { a: usize, b: usize },
    Upsample { src: usize },
    Concat { srcs: Vec<usize> },
}

struct Builder<S> {
    spec: ModelSpec,
    rng: ChaCha8Rng,
    params: Vec<Parameter<S>>,
    names: Vec<String>,
    convs: Vec<ConvLayer>,
    lifs: Vec<LifLayer>,
    nodes: Vec<Node>,
    channels: Vec<usize>,
    heads: Vec<usize>,
}

impl<S: Scalar> Builder<S> {
    fn push(&mut self, node: Node, channels: usize) -> usize {
        self.nodes.push(node);
        self.channels.push(channels);
        self.nodes.len() - 1
    }

    fn param(&mut self, name: String, value: Tensor<S>) -> usize {
        self.params.push(Parameter::new(value));
        self.names.push(name);
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, src: usize, out: usize, kernel: usize, stride: usize, role: ConvRole) -> usize {
        let cin = self.channels[src];
        let fan_in = (cin * kernel * kernel) as f64;
        // Uniform, scaled by fan-in. Hidden layers use the He bound so that
        // binary inputs produce enough drive to reach threshold. Small random
        // hidden biases keep silent neurons off the surrogate window edge at
        // u = 0; heads start unbiased so the untrained flow is centred.
        let bound = match role {
            ConvRole::Hidden => (6.0 / fan_in).sqrt(),
            ConvRole::Head => (1.0 / fan_in).sqrt(),
        };
        let w = Tensor::from_fn(&[out, cin, kernel, kernel], |_| S::lit(self.rng.gen_range(-bound..bound)));
        let b = match role {
            ConvRole::Hidden => {
                let bias_bound = (1.0 / fan_in).sqrt();
                Tensor::from_fn(&[out], |_| S::lit(self.rng.gen_range(-bias_bound..bias_bound)))
            }
            ConvRole::Head => Tensor::zeros(&[out]),
        };
        let weight = self.param(format!("{name}.weight"), w);
        let bias = self.param(format!("{name}.bias"), b);
        self.convs.push(ConvLayer {
            name: name.to_string(),
            in_channels: cin,
            out_channels: out,
            kernel,
            geom: ConvGeometry::new(stride, kernel / 2),
            role,
            weight,
            bias,
        });
        let layer = self.convs.len() - 1;
        let id = self.push(Node::Conv { layer, src }, out);
        if role == ConvRole::Head {
            self.heads.push(id);
        }
        id
    }

    fn activation(&mut self, name: &str, src: usize) -> usize {
        let ch = self.channels[src];
        match self.spec.neuron {
            Neuron::Analog => self.push(Node::Relu { src }, ch),
            Neuron::Spiking => {
                let i = self.lifs.len();
                let v_th = self.param(format!("layer{i}.v_th"), Tensor::scalar(S::lit(self.spec.init_threshold)));
                let leak = self.param(format!("layer{i}.leak"), Tensor::scalar(S::lit(self.spec.init_leak)));
                self.lifs.push(LifLayer {
                    name: name.to_string(),
                    v_th,
                    leak,
                });
                self.push(Node::Lif { layer: i, src }, ch)
            }
        }
    }

    fn conv_act(&mut self, name: &str, src: usize, out: usize, stride: usize) -> usize {
        let c = self.conv(name, src, out, 3, stride, ConvRole::Hidden);
        self.activation(name, c)
    }

    /// Two 3x3 convs; the block input is added to the second conv's current
    /// before its neuron.
    fn residual(&mut self, name: &str, src: usize) -> usize {
        let ch = self.channels[src];
        let a = self.conv_act(&format!("{name}a"), src, ch, 1);
        let c = self.conv(&format!("{name}b"), a, ch, 3, 1, ConvRole::Hidden);
        let sum = self.push(Node::Add { a: c, b: src }, ch);
        self.activation(&format!("{name}b"), sum)
    }

    fn upsample(&mut self, src: usize) -> usize {
        let ch = self.channels[src];
        self.push(Node::Upsample { src }, ch)
    }

    fn concat(&mut self, srcs: Vec<usize>) -> usize {
        let ch = srcs.iter().map(|&s| self.channels[s]).sum();
        self.push(Node::Concat { srcs }, ch)
    }

    fn build_unet(&mut self) {
        let b = self.spec.base_channels;
        let input = self.push(Node::Input, self.spec.input_channels());
        let e1 = self.conv_act("enc1", input, b, 2);
        let e2 = self.conv_act("enc2", e1, 2 * b, 2);
        let e3 = self.conv_act("enc3", e2, 4 * b, 2);
        let e4 = self.conv_act("enc4", e3, 8 * b, 2);
        let r1 = self.residual("res1", e4);
        let r2 = self.residual("res2", r1);

        let up = self.upsample(r2);
        let cat = self.concat(vec![up, e3]);
        let d1 = self.conv_act("dec1", cat, 4 * b, 1);
        let f1 = self.conv("flow1", d1, 2, 1, 1, ConvRole::Head);

        let mut prev = d1;
        let mut prev_flow = f1;
        for (stage, skip, out) in [(2, Some(e2), 2 * b), (3, Some(e1), b), (4, None, b)] {
            let up = self.upsample(prev);
            let up_flow = self.upsample(prev_flow);
            let mut srcs = vec![up];
            srcs.extend(skip);
            srcs.push(up_flow);
            let cat = self.concat(srcs);
            prev = self.conv_act(&format!("dec{stage}"), cat, out, 1);
            prev_flow = self.conv(&format!("flow{stage}"), prev, 2, 1, 1, ConvRole::Head);
        }
    }

    fn build_firenet(&mut self) {
        let c = self.spec.base_channels;
        let input = self.push(Node::Input, self.spec.input_channels());
        let head = self.conv_act("head", input, c, 1);
        let g1 = self.conv_act("g1", head, c, 1);
        let r1 = self.residual("r1", g1);
        let g2 = self.conv_act("g2", r1, c, 1);
        let r2 = self.residual("r2", g2);
        self.conv("pred", r2, 2, 1, 1, ConvRole::Head);
    }
}

/// Per-layer activity gathered during a forward pass, used by the profiler.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Activity {
    pub timesteps: usize,
    /// Total spikes per LIF layer.
    pub lif_spikes: Vec<f64>,
    /// Neurons per LIF layer.
    pub lif_neurons: Vec<usize>,
    /// Non-zero input elements seen by each conv, summed over timesteps.
    pub conv_active_inputs: Vec<f64>,
    /// Input elements per conv per timestep.
    pub conv_inputs: Vec<usize>,
    /// Output neurons per conv per timestep.
    pub conv_outputs: Vec<usize>,
    /// Largest membrane magnitude seen per LIF layer.
    pub lif_max_abs_u: Vec<f64>,
}

impl Activity {
    /// Mean spikes per neuron per timestep of LIF layer `l`.
    pub fn firing_rate(&self, l: usize) -> f64 {
        self.lif_spikes[l] / (self.lif_neurons[l] * self.timesteps).max(1) as f64
    }

    /// Fraction of non-zero inputs to conv `c`.
    pub fn input_activity(&self, c: usize) -> f64 {
        self.conv_active_inputs[c] / (self.conv_inputs[c] * self.timesteps).max(1) as f64
    }

    pub fn merge(&mut self, other: &Activity) {
        if self.lif_spikes.is_empty() && self.conv_inputs.is_empty() {
            *self = other.clone();
            return;
        }
        self.timesteps += other.timesteps;
        for (a, b) in self.lif_spikes.iter_mut().zip(&other.lif_spikes) {
            *a += b;
        }
        for (a, b) in self.conv_active_inputs.iter_mut().zip(&other.conv_active_inputs) {
            *a += b;
        }
        for (a, b) in self.lif_max_abs_u.iter_mut().zip(&other.lif_max_abs_u) {
            *a = a.max(*b);
        }
    }
}

/// Values retained by a forward pass for BPTT.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    values: Vec<Vec<Option<Tensor<S>>>>,
    records: Vec<Vec<StepRecord<S>>>,
}

impl<S: Scalar> Trace<S> {
    pub fn timesteps(&self) -> usize {
        self.values.len()
    }

    /// Per-timestep outputs of flow head `s` (coarse to fine).
    pub fn head_outputs<'a>(&'a self, net: &'a Network<S>, s: usize) -> impl Iterator<Item = &'a Tensor<S>> + 'a {
        let id = net.heads[s];
        self.values.iter().map(move |v| v[id].as_ref().expect("head value"))
    }

    /// LIF step records of layer `l`, one per timestep.
    pub fn lif_records(&self, l: usize) -> &[StepRecord<S>] {
        &self.records[l]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// `flow_scale * tanh(accumulator)` of the full-resolution head.
    pub flow: FlowField<S>,
    /// Raw per-head sums over timesteps, coarse to fine, each `[1, 2, h, w]`.
    pub accumulators: Vec<Tensor<S>>,
    pub activity: Activity,
    pub trace: Option<Trace<S>>,
}

#[derive(Debug, Clone)]
pub struct Network<S> {
    spec: ModelSpec,
    seed: u64,
    params: Vec<Parameter<S>>,
    names: Vec<String>,
    convs: Vec<ConvLayer>,
    lifs: Vec<LifLayer>,
    nodes: Vec<Node>,
    heads: Vec<usize>,
}

pub fn build_model<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Network<S>> {
    spec.validate()?;
    let mut b = Builder {
        spec: spec.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        names: Vec::new(),
        convs: Vec::new(),
        lifs: Vec::new(),
        nodes: Vec::new(),
        channels: Vec::new(),
        heads: Vec::new(),
    };
    match spec.kind {
        Kind::UNet => b.build_unet(),
        Kind::FireNet => b.build_firenet(),
    }
    Ok(Network {
        spec: spec.clone(),
        seed,
        params: b.params,
        names: b.names,
        convs: b.convs,
        lifs: b.lifs,
        nodes: b.nodes,
        heads: b.heads,
    })
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(t) => t.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl<S: Scalar> Network<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<S>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn lif_layers(&self) -> &[LifLayer] {
        &self.lifs
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Number of learnable scalars, including thresholds and leaks.
    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of synaptic weights and biases only.
    pub fn num_conv_parameters(&self) -> usize {
        self.convs
            .iter()
            .map(|c| self.params[c.weight].value.len() + self.params[c.bias].value.len())
            .sum()
    }

    pub fn lif_params(&self, l: usize) -> LifParams<S> {
        let layer = &self.lifs[l];
        LifParams::new(self.params[layer.v_th].value.data()[0], self.params[layer.leak].value.data()[0])
    }

    pub fn set_lif_params(&mut self, l: usize, p: LifParams<S>) {
        let (v, k) = (self.lifs[l].v_th, self.lifs[l].leak);
        self.params[v].value.data_mut()[0] = p.v_th;
        self.params[k].value.data_mut()[0] = p.leak;
    }

    /// Sets every layer's threshold.
    pub fn set_all_thresholds(&mut self, v_th: S) {
        for l in 0..self.lifs.len() {
            let p = self.lif_params(l);
            self.set_lif_params(l, LifParams::new(v_th, p.leak));
        }
    }

    /// Projects thresholds and leaks back into their valid range.
    pub fn clamp_dynamics(&mut self) {
        for l in 0..self.lifs.len() {
            let p = self.lif_params(l).clamped();
            self.set_lif_params(l, p);
        }
    }

    pub fn zero_bias(&mut self) {
        for c in 0..self.convs.len() {
            let b = self.convs[c].bias;
            self.params[b].value.fill(S::zero());
        }
    }

    pub fn flow_from_accumulator(&self, acc: &Tensor<S>) -> Result<FlowField<S>> {
        let scale = S::lit(self.spec.flow_scale);
        FlowField::from_tensor(acc.map(|a| scale * a.tanh()))
    }

    /// `dL/dacc` from `dL/dflow` for `flow = scale * tanh(acc)`.
    pub fn accumulator_grad(&self, acc: &Tensor<S>, d_flow: &FlowField<S>) -> Result<Tensor<S>> {
        let scale = S::lit(self.spec.flow_scale);
        let (h, w) = (d_flow.height(), d_flow.width());
        let d = d_flow.tensor();
        if acc.len() != d.len() {
            return Err(Error::shape("accumulator_grad", acc.shape(), d.shape()));
        }
        let data = acc
            .data()
            .iter()
            .zip(d.data())
            .map(|(&a, &g)| {
                let t = a.tanh();
                g * scale * (S::one() - t * t)
            })
            .collect();
        Tensor::from_vec(&[1, 2, h, w], data)
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spec.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::SpatialSize {
                height: h,
                width: w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Spiking forward pass over the grouped input's timesteps.
    pub fn forward(&self, input: &GroupedInput<S>, retain_trace: bool) -> Result<ForwardOutput<S>> {
        if self.spec.neuron != Neuron::Spiking {
            return Err(Error::Mismatch("forward() needs a spiking network; use forward_analog".into()));
        }
        self.check_spatial(input.height(), input.width())?;
        let frames: Vec<Tensor<S>> = (0..input.timesteps()).map(|t| input.frame(t)).collect();
        self.run(&frames, retain_trace)
    }

    /// Single-pass analog forward with all bins as channels.
    pub fn forward_analog(&self, volume: &EventVolume<S>, retain_trace: bool) -> Result<ForwardOutput<S>> {
        if self.spec.neuron != Neuron::Analog {
            return Err(Error::Mismatch("forward_analog() needs an analog network".into()));
        }
        if volume.bins() != self.spec.bins() {
            return Err(Error::Mismatch(format!("volume has {} bins, model expects {}", volume.bins(), self.spec.bins())));
        }
        self.check_spatial(volume.height(), volume.width())?;
        self.run(&[volume.as_channels()], retain_trace)
    }

    /// Dispatches on neuron type: grouped frames for spiking, channels for analog.
    pub fn predict(&self, volume: &EventVolume<S>, retain_trace: bool) -> Result<ForwardOutput<S>> {
        match self.spec.neuron {
            Neuron::Spiking => self.forward(&crate::events::group_former_latter(volume)?, retain_trace),
            Neuron::Analog => self.forward_analog(volume, retain_trace),
        }
    }

    /// Runs the graph once per frame. Each frame is `[1, c, h, w]`.
    pub fn run(&self, frames: &[Tensor<S>], retain_trace: bool) -> Result<ForwardOutput<S>> {
        let first = frames.first().ok_or(Error::IncompleteTrace { have: 0, need: 1 })?;
        let (_, c, _, _) = first.dims4()?;
        if c != self.spec.input_channels() {
            return Err(Error::Mismatch(format!("input has {c} channels, model expects {}", self.spec.input_channels())));
        }
        let t_steps = frames.len();
        let mut states: Vec<Option<LifState<S>>> = vec![None; self.lifs.len()];
        let mut records: Vec<Vec<StepRecord<S>>> = vec![Vec::new(); self.lifs.len()];
        let mut all_values = Vec::new();
        let mut accumulators: Vec<Option<Tensor<S>>> = vec![None; self.heads.len()];
        let mut activity = Activity {
            timesteps: t_steps,
            lif_spikes: vec![0.0; self.lifs.len()],
            lif_neurons: vec![0; self.lifs.len()],
            conv_active_inputs: vec![0.0; self.convs.len()],
            conv_inputs: vec![0; self.convs.len()],
            conv_outputs: vec![0; self.convs.len()],
            lif_max_abs_u: vec![0.0; self.lifs.len()],
        };

        for frame in frames {
            let mut values: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
            for (id, node) in self.nodes.iter().enumerate() {
                let val = |i: usize| values[i].as_ref().expect("topological order");
                let out = match node {
                    Node::Input => frame.clone(),
                    Node::Conv { layer, src } => {
                        let conv = &self.convs[*layer];
                        let x = val(*src);
                        activity.conv_inputs[*layer] = x.len();
                        activity.conv_active_inputs[*layer] +=
                            x.data().iter().filter(|v| **v != S::zero()).count() as f64;
                        let y = conv2d(x, &self.params[conv.weight].value, Some(&self.params[conv.bias].value), conv.geom)?;
                        activity.conv_outputs[*layer] = y.len();
                        y
                    }
                    Node::Lif { layer, src } => {
                        let current = val(*src);
                        let state = states[*layer].get_or_insert_with(|| LifState::zeros(current.shape()));
                        let rec = lif_step(state, current, &self.lif_params(*layer), self.spec.lif.reset)
                            .map_err(|e| match e {
                                Error::NonFiniteCurrent { .. } => Error::NonFiniteCurrent { layer: *layer },
                                other => other,
                            })?;
                        activity.lif_neurons[*layer] = rec.o.len();
                        activity.lif_spikes[*layer] += rec.o.sum().to_f64_lossy();
                        let m = rec.u.max_abs().to_f64_lossy();
                        if m > activity.lif_max_abs_u[*layer] {
                            activity.lif_max_abs_u[*layer] = m;
                        }
                        let o = rec.o.clone();
                        if retain_trace {
                            records[*layer].push(rec);
                        }
                        o
                    }
                    Node::Relu { src } => relu(val(*src)),
                    Node::Add { a, b } => crate::tensor::add(val(*a), val(*b))?,
                    Node::Upsample { src } => upsample_bilinear2x(val(*src))?,
                    Node::Concat { srcs } => {
                        let parts: Vec<&Tensor<S>> = srcs.iter().map(|&s| val(s)).collect();
                        concat_channels(&parts)?
                    }
                };
                values[id] = Some(out);
            }
            for (s, &h) in self.heads.iter().enumerate() {
                accumulate(&mut accumulators[s], values[h].clone().expect("head"))?;
            }
            if retain_trace {
                all_values.push(values);
            }
        }
        let accumulators: Vec<Tensor<S>> = accumulators.into_iter().map(|a| a.expect("head output")).collect();
        let flow = self.flow_from_accumulator(accumulators.last().expect("at least one head"))?;
        Ok(ForwardOutput {
            flow,
            accumulators,
            activity,
            trace: retain_trace.then_some(Trace {
                values: all_values,
                records,
            }),
        })
    }

    /// Backpropagation through time. `d_acc[s]` is the loss gradient with
    /// respect to accumulator `s` (or `None`). Returns one gradient per
    /// parameter, aligned with [`Network::params`].
    pub fn backward(&self, trace: &Trace<S>, d_acc: &[Option<Tensor<S>>]) -> Result<Vec<Tensor<S>>> {
        if d_acc.len() != self.heads.len() {
            return Err(Error::shape("backward d_acc", &[self.heads.len()], &[d_acc.len()]));
        }
        let mut grads: Vec<Tensor<S>> = self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let mut lif_back: Vec<LifBackward<S>> = self.lifs.iter().map(|_| LifBackward::new(self.spec.lif)).collect();
        let mut carried = vec![false; self.lifs.len()];
        let t_steps = trace.timesteps();
        for layer in 0..self.lifs.len() {
            if trace.records[layer].len() != t_steps {
                return Err(Error::IncompleteTrace {
                    have: trace.records[layer].len(),
                    need: t_steps,
                });
            }
        }

        for t in (0..t_steps).rev() {
            let values = &trace.values[t];
            let mut g: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
            for (s, &h) in self.heads.iter().enumerate() {
                if let Some(d) = &d_acc[s] {
                    accumulate(&mut g[h], d.clone())?;
                }
            }
            for id in (0..self.nodes.len()).rev() {
                let node = &self.nodes[id];
                if let Node::Lif { layer, src } = node {
                    let upstream = g[id].take();
                    if upstream.is_none() && !carried[*layer] {
                        continue;
                    }
                    let rec = &trace.records[*layer][t];
                    let d = lif_back[*layer].step(rec, upstream.as_ref(), &self.lif_params(*layer));
                    carried[*layer] = true;
                    accumulate(&mut g[*src], d)?;
                    continue;
                }
                let Some(gn) = g[id].take() else { continue };
                match node {
                    Node::Input | Node::Lif { .. } => {}
                    Node::Conv { layer, src } => {
                        let conv = &self.convs[*layer];
                        let want_input = !matches!(self.nodes[*src], Node::Input);
                        let x = values[*src].as_ref().expect("retained value");
                        let cg = conv2d_backward(x, &self.params[conv.weight].value, &gn, conv.geom, want_input)?;
                        grads[conv.weight].add_assign(&cg.weight)?;
                        grads[conv.bias].add_assign(&cg.bias)?;
                        if let Some(gi) = cg.input {
                            accumulate(&mut g[*src], gi)?;
                        }
                    }
                    Node::Relu { src } => {
                        let y = values[id].as_ref().expect("retained value");
                        accumulate(&mut g[*src], relu_backward(y, &gn)?)?;
                    }
                    Node::Add { a, b } => {
                        accumulate(&mut g[*a], gn.clone())?;
                        accumulate(&mut g[*b], gn)?;
                    }
                    Node::Upsample { src } => {
                        accumulate(&mut g[*src], upsample_bilinear2x_backward(&gn)?)?;
                    }
                    Node::Concat { srcs } => {
                        let chans: Vec<usize> = srcs
                            .iter()
                            .map(|&s| values[s].as_ref().expect("retained value").shape()[1])
                            .collect();
                        for (&s, part) in srcs.iter().zip(concat_channels_backward(&gn, &chans)?) {
                            if !matches!(self.nodes[s], Node::Input) {
                                accumulate(&mut g[s], part)?;
                            }
                        }
                    }
                }
            }
        }
        for (l, layer) in self.lifs.iter().enumerate() {
            grads[layer.v_th].data_mut()[0] += lif_back[l].d_v_th;
            grads[layer.leak].data_mut()[0] += lif_back[l].d_leak;
        }
        Ok(grads)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} b={} T={} flow_scale={}",
            self.neuron.name(),
            self.kind.name(),
            self.base_channels,
            self.timesteps,
            self.flow_scale
        )
    }
}
