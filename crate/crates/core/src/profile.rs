//! Synaptic operation counts and the accumulate/multiply-accumulate energy
//! model.
//!
//! Each convolution contributes `M` output neurons with `C = kh * kw * cin`
//! connections each. A spiking network performs `T * M * C * F` operations
//! per layer, where `F` is the measured fraction of non-zero inputs per
//! timestep; an analog network performs `M * C`. Layers fed by analog values
//! (the event-volume input layer and the flow heads) are tallied as MACs.

use std::fmt;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::EventVolume;
use crate::model::{Activity, ConvRole, Network, Neuron};
use crate::tensor::Scalar;

/// Energy per accumulate, in picojoules (45 nm CMOS).
pub const E_AC_PJ: f64 = 0.9;
/// Energy per multiply-accumulate, in picojoules (45 nm CMOS).
pub const E_MAC_PJ: f64 = 4.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OpKind {
    /// Spike-driven accumulate.
    Ac,
    /// Analog-driven multiply-accumulate.
    Mac,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerProfile {
    pub name: String,
    /// Output neurons.
    pub m: usize,
    /// Connections per output neuron.
    pub c: usize,
    /// Mean non-zero inputs per connection per timestep.
    pub f: f64,
    pub t: usize,
    pub kind: OpKind,
}

impl LayerProfile {
    pub fn ops_ann(&self) -> f64 {
        (self.m * self.c) as f64
    }

    pub fn ops_snn(&self) -> f64 {
        self.t as f64 * self.m as f64 * self.c as f64 * self.f
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct OpsCount {
    pub ops_snn: f64,
    pub ops_ann: f64,
    /// Portion of `ops_snn` from analog-driven layers.
    pub ops_snn_mac: f64,
}

/// `ops_snn = sum T M C F`, `ops_ann = sum M C`.
pub fn count_ops(profiles: &[LayerProfile]) -> OpsCount {
    let mut out = OpsCount::default();
    for p in profiles {
        out.ops_snn += p.ops_snn();
        out.ops_ann += p.ops_ann();
        if p.kind == OpKind::Mac {
            out.ops_snn_mac += p.ops_snn();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Energy {
    /// `ops_snn * E_AC`, in millijoules.
    pub e_snn_mj: f64,
    /// `ops_ann * E_MAC`, in millijoules.
    pub e_ann_mj: f64,
}

impl Energy {
    /// ANN-to-SNN energy ratio; infinite when the SNN performs no operations.
    pub fn improvement(&self) -> f64 {
        self.e_ann_mj / self.e_snn_mj
    }
}

const PJ_PER_MJ: f64 = 1e9;

pub fn energy(ops_snn: f64, ops_ann: f64) -> Energy {
    Energy {
        e_snn_mj: ops_snn * E_AC_PJ / PJ_PER_MJ,
        e_ann_mj: ops_ann * E_MAC_PJ / PJ_PER_MJ,
    }
}

/// Activity gathered over a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityProfile {
    pub activity: Activity,
    pub samples: usize,
}

impl ActivityProfile {
    /// Mean spikes per neuron per timestep of each LIF layer.
    pub fn firing_rates(&self) -> Vec<f64> {
        (0..self.activity.lif_spikes.len()).map(|l| self.activity.firing_rate(l)).collect()
    }

    /// Percentage of neurons firing per timestep across all LIF layers.
    pub fn mean_activity_percent(&self) -> f64 {
        let spikes: f64 = self.activity.lif_spikes.iter().sum();
        let slots: usize = self.activity.lif_neurons.iter().sum::<usize>() * self.activity.timesteps;
        100.0 * spikes / slots.max(1) as f64
    }
}

/// Runs the spiking network over `volumes` and accumulates activity.
pub fn measure_activity<S: Scalar>(net: &Network<S>, volumes: &[EventVolume<S>]) -> Result<ActivityProfile> {
    if net.spec().neuron != Neuron::Spiking {
        return Err(Error::ActivityUndefined);
    }
    if volumes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let runs: Vec<Result<Activity>> = volumes.par_iter().map(|v| Ok(net.predict(v, false)?.activity)).collect();
    let mut activity = Activity::default();
    for r in runs {
        activity.merge(&r?);
    }
    Ok(ActivityProfile {
        activity,
        samples: volumes.len(),
    })
}

fn op_kind(first: bool, role: ConvRole) -> OpKind {
    if first || role == ConvRole::Head {
        OpKind::Mac
    } else {
        OpKind::Ac
    }
}

/// Per-conv profiles. With `activity`, `F` and `T` are the measured values;
/// without, `F = 1` and `T = 1` (dense analog execution). `height` and
/// `width` are the input size.
pub fn layer_profiles<S: Scalar>(net: &Network<S>, height: usize, width: usize, activity: Option<&ActivityProfile>) -> Vec<LayerProfile> {
    let mut h_w: Vec<(usize, usize)> = Vec::new();
    let mut profiles = Vec::new();
    let divisor = |c: &crate::model::ConvLayer, h: usize| (h + 2 * c.geom.padding - c.kernel) / c.geom.stride + 1;
    for (i, conv) in net.conv_layers().iter().enumerate() {
        let m = match activity {
            Some(a) if a.activity.conv_outputs.get(i).copied().unwrap_or(0) > 0 => a.activity.conv_outputs[i],
            _ => {
                let (ih, iw) = conv_input_size(net, i, height, width, &h_w);
                let (oh, ow) = (divisor(conv, ih), divisor(conv, iw));
                h_w.push((oh, ow));
                oh * ow * conv.out_channels
            }
        };
        let (f, t) = match activity {
            Some(a) => (a.activity.input_activity(i), a.activity.timesteps / a.samples.max(1)),
            None => (1.0, 1),
        };
        profiles.push(LayerProfile {
            name: conv.name.clone(),
            m,
            c: conv.fan_in(),
            f,
            t,
            kind: op_kind(i == 0, conv.role),
        });
    }
    profiles
}

/// Input spatial size of conv `i`, derived from the U-Net / FireNet layout:
/// encoders halve the resolution, decoders double it.
fn conv_input_size<S: Scalar>(net: &Network<S>, i: usize, height: usize, width: usize, outs: &[(usize, usize)]) -> (usize, usize) {
    let conv = &net.conv_layers()[i];
    if i == 0 {
        return (height, width);
    }
    let prev = outs[i - 1];
    if conv.role == ConvRole::Head {
        return prev;
    }
    if conv.name.starts_with("dec") {
        // Decoder input is the upsampled previous decoder (or residual) output.
        let src = outs
            .iter()
            .zip(net.conv_layers())
            .rev()
            .find(|(_, c)| c.role == ConvRole::Hidden)
            .map_or(prev, |(s, _)| *s);
        return (src.0 * 2, src.1 * 2);
    }
    prev
}

/// A Table-2-style summary for one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub model: String,
    pub params: usize,
    pub ops_ann: f64,
    /// `None` for analog networks.
    pub ops_snn: Option<f64>,
    pub ops_snn_mac: Option<f64>,
    pub activity_percent: Option<f64>,
    pub e_ann_mj: f64,
    pub e_snn_mj: Option<f64>,
    /// Mixed estimate charging analog-driven layers at the MAC cost.
    pub e_mixed_mj: Option<f64>,
    /// `e_ann_mj / e_snn_mj`.
    pub improvement: Option<f64>,
    pub layers: Vec<LayerProfile>,
    pub firing_rates: Vec<f64>,
}

impl EnergyReport {
    pub fn analog<S: Scalar>(net: &Network<S>, height: usize, width: usize) -> Self {
        let layers = layer_profiles(net, height, width, None);
        let ops = count_ops(&layers);
        EnergyReport {
            model: net.spec().to_string(),
            params: net.num_parameters(),
            ops_ann: ops.ops_ann,
            ops_snn: None,
            ops_snn_mac: None,
            activity_percent: None,
            e_ann_mj: energy(0.0, ops.ops_ann).e_ann_mj,
            e_snn_mj: None,
            e_mixed_mj: None,
            improvement: None,
            layers,
            firing_rates: Vec::new(),
        }
    }

    pub fn spiking<S: Scalar>(net: &Network<S>, height: usize, width: usize, activity: &ActivityProfile) -> Self {
        let layers = layer_profiles(net, height, width, Some(activity));
        let ops = count_ops(&layers);
        let e = energy(ops.ops_snn, ops.ops_ann);
        let ac = ops.ops_snn - ops.ops_snn_mac;
        EnergyReport {
            model: net.spec().to_string(),
            params: net.num_parameters(),
            ops_ann: ops.ops_ann,
            ops_snn: Some(ops.ops_snn),
            ops_snn_mac: Some(ops.ops_snn_mac),
            activity_percent: Some(activity.mean_activity_percent()),
            e_ann_mj: e.e_ann_mj,
            e_snn_mj: Some(e.e_snn_mj),
            e_mixed_mj: Some((ac * E_AC_PJ + ops.ops_snn_mac * E_MAC_PJ) / PJ_PER_MJ),
            improvement: Some(e.improvement()),
            layers,
            firing_rates: activity.firing_rates(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub const HEADER: &'static str =
        "model                                 params(1e6)  OPS_ANN(1e9)  activity(%)  OPS_SNN(1e9)  E_total(mJ)  improvement(x)";

    pub fn row(&self) -> String {
        let na = |x: Option<f64>, prec: usize| x.map_or("n/a".to_string(), |v| format!("{v:.prec$}"));
        let e_total = self.e_snn_mj.unwrap_or(self.e_ann_mj);
        format!(
            "{:<36}  {:>11.4}  {:>12.4}  {:>11}  {:>12}  {:>11.4}  {:>14}",
            self.model,
            self.params as f64 / 1e6,
            self.ops_ann / 1e9,
            na(self.activity_percent, 2),
            na(self.ops_snn.map(|o| o / 1e9), 4),
            e_total,
            na(self.improvement, 2),
        )
    }
}

impl fmt::Display for EnergyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        writeln!(f, "{}", self.row())?;
        writeln!(f)?;
        writeln!(f, "layer      kind  M           C       F         OPS_ANN       OPS_SNN")?;
        for l in &self.layers {
            let snn = if self.ops_snn.is_some() { format!("{:.0}", l.ops_snn()) } else { "n/a".into() };
            writeln!(
                f,
                "{:<10} {:<4}  {:<10}  {:<6}  {:<8.5}  {:<12.0}  {}",
                l.name,
                match l.kind {
                    OpKind::Ac => "AC",
                    OpKind::Mac => "MAC",
                },
                l.m,
                l.c,
                l.f,
                l.ops_ann(),
                snn
            )?;
        }
        if let Some(e) = self.e_mixed_mj {
            writeln!(f)?;
            writeln!(f, "E_mixed(mJ)={e:.6}")?;
        }
        Ok(())
    }
}
