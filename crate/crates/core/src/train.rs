//! BPTT training: datasets, augmentation, Adam, checkpoints and the epoch
//! loop.
//!
//! Per-sample gradients within a batch are computed in parallel and then
//! reduced sequentially in sample order, so results do not depend on the
//! number of worker threads.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::events::{build_event_volume, EventStream, EventVolume, SynthScene};
use crate::flow::FlowField;
use crate::model::{build_model, fmt_f64, Activity, ModelSpec, Network, Neuron};
use crate::objectives::{supervised_loss, total_ssl_loss, FlowMetrics, LossConfig};
use crate::tensor::snapshot::Snapshot;
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    Ssl,
    Supervised,
}

impl LossMode {
    pub fn name(self) -> &'static str {
        match self {
            LossMode::Ssl => "ssl",
            LossMode::Supervised => "supervised",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ssl" => Ok(LossMode::Ssl),
            "supervised" => Ok(LossMode::Supervised),
            _ => Err(Error::Config(format!("loss.mode: unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_period: usize,
    /// Random crop `(height, width)`; `None` trains on full frames.
    pub crop: Option<(usize, usize)>,
    pub hflip: bool,
    pub vflip: bool,
    /// Random multiples of 90 degrees.
    pub rotate: bool,
    pub mode: LossMode,
    pub loss: LossConfig,
    pub seed: u64,
    pub precision: DType,
    /// Global gradient-norm clip; off by default.
    pub max_grad_norm: Option<f64>,
    /// Stop once validation AEE falls to this value.
    pub target_aee: Option<f64>,
}

impl TrainConfig {
    pub fn ssl() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            lr: 1e-4,
            lr_decay: 0.7,
            lr_period: 10,
            crop: Some((256, 256)),
            hflip: true,
            vflip: true,
            rotate: true,
            mode: LossMode::Ssl,
            loss: LossConfig::default(),
            seed: 0,
            precision: DType::F32,
            max_grad_norm: None,
            target_aee: None,
        }
    }

    pub fn supervised() -> Self {
        TrainConfig {
            epochs: 50,
            lr_decay: 1.0,
            crop: Some((288, 384)),
            rotate: false,
            mode: LossMode::Supervised,
            ..Self::ssl()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_period == 0 {
            return self.lr;
        }
        self.lr * self.lr_decay.powi((epoch / self.lr_period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("train.lr must be >= 0 and train.lr_decay > 0".into()));
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::Config("train.crop must be positive".into()));
            }
        }
        self.loss.validate()
    }

    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("train.epochs".into(), self.epochs.to_string());
        m.insert("train.batch_size".into(), self.batch_size.to_string());
        m.insert("train.lr".into(), fmt_f64(self.lr));
        m.insert("train.lr_decay".into(), fmt_f64(self.lr_decay));
        m.insert("train.lr_period".into(), self.lr_period.to_string());
        m.insert("train.crop".into(), self.crop.map_or("none".into(), |(h, w)| format!("{h}x{w}")));
        m.insert("train.hflip".into(), self.hflip.to_string());
        m.insert("train.vflip".into(), self.vflip.to_string());
        m.insert("train.rotate".into(), self.rotate.to_string());
        m.insert("train.precision".into(), self.precision.name().into());
        m.insert("train.max_grad_norm".into(), self.max_grad_norm.map_or("none".into(), fmt_f64));
        m.insert("train.target_aee".into(), self.target_aee.map_or("none".into(), fmt_f64));
        m.insert("loss.mode".into(), self.mode.name().into());
        m.insert("loss.alpha".into(), fmt_f64(self.loss.alpha));
        m.insert("loss.r".into(), fmt_f64(self.loss.r));
        m.insert("loss.eta".into(), fmt_f64(self.loss.eta));
        m.insert("loss.normalize".into(), self.loss.normalize.to_string());
        m.insert("loss.event_mask".into(), self.loss.photometric_event_mask.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m
    }
}

/// Model and training configuration read from flat `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSpec::unet(8, Neuron::Spiking),
            train: TrainConfig::ssl(),
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "model.kind",
    "model.base_channels",
    "model.neuron",
    "model.timesteps",
    "model.flow_scale",
    "model.surrogate_gamma",
    "model.reset",
    "model.init_threshold",
    "model.init_leak",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.lr_decay",
    "train.lr_period",
    "train.crop",
    "train.hflip",
    "train.vflip",
    "train.rotate",
    "train.precision",
    "train.max_grad_norm",
    "train.target_aee",
    "loss.mode",
    "loss.alpha",
    "loss.r",
    "loss.eta",
    "loss.normalize",
    "loss.event_mask",
    "seed",
];

/// Splits `key=value` lines; `#` starts a comment. Unknown and repeated
/// keys are errors.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !CONFIG_KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_optional_f64(key: &str, v: &str) -> Result<Option<f64>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_map(&parse_key_values(text)?)
    }

    /// Missing keys take the defaults of the selected loss mode.
    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        for k in m.keys() {
            if !CONFIG_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let model = ModelSpec::from_manifest(m)?;
        let mode = LossMode::parse(m.get("loss.mode").map_or("ssl", String::as_str))?;
        let mut t = match mode {
            LossMode::Ssl => TrainConfig::ssl(),
            LossMode::Supervised => TrainConfig::supervised(),
        };
        for (k, v) in m {
            let v = v.as_str();
            match k.as_str() {
                "train.epochs" => t.epochs = parse_value(k, v)?,
                "train.batch_size" => t.batch_size = parse_value(k, v)?,
                "train.lr" => t.lr = parse_value(k, v)?,
                "train.lr_decay" => t.lr_decay = parse_value(k, v)?,
                "train.lr_period" => t.lr_period = parse_value(k, v)?,
                "train.crop" => {
                    t.crop = if v == "none" {
                        None
                    } else {
                        let (h, w) = v
                            .split_once('x')
                            .ok_or_else(|| Error::Config(format!("{k}: expected HxW or none, got {v:?}")))?;
                        Some((parse_value(k, h)?, parse_value(k, w)?))
                    }
                }
                "train.hflip" => t.hflip = parse_value(k, v)?,
                "train.vflip" => t.vflip = parse_value(k, v)?,
                "train.rotate" => t.rotate = parse_value(k, v)?,
                "train.precision" => {
                    t.precision = match v {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(Error::Config(format!("{k}: expected f32 or f64, got {v:?}"))),
                    }
                }
                "train.max_grad_norm" => t.max_grad_norm = parse_optional_f64(k, v)?,
                "train.target_aee" => t.target_aee = parse_optional_f64(k, v)?,
                "loss.alpha" => t.loss.alpha = parse_value(k, v)?,
                "loss.r" => t.loss.r = parse_value(k, v)?,
                "loss.eta" => t.loss.eta = parse_value(k, v)?,
                "loss.normalize" => t.loss.normalize = parse_value(k, v)?,
                "loss.event_mask" => t.loss.photometric_event_mask = parse_value(k, v)?,
                "seed" => t.seed = parse_value(k, v)?,
                _ => {}
            }
        }
        t.validate()?;
        Ok(RunConfig { model, train: t })
    }

    pub fn to_manifest(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_manifest();
        m.extend(self.train.to_manifest());
        m
    }

    /// Resolved configuration as `key=value` lines.
    pub fn to_text(&self) -> String {
        self.to_manifest().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// One training example. Images are `[H, W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<S> {
    pub volume: EventVolume<S>,
    pub image_before: Tensor<S>,
    pub image_after: Tensor<S>,
    pub gt_flow: Option<FlowField<S>>,
    /// Pixels with at least one event in the volume window.
    pub event_mask: Vec<bool>,
}

impl<S: Scalar> Sample<S> {
    pub fn from_scene(scene: &SynthScene, bins: usize) -> Result<Self> {
        Self::from_parts(&scene.stream, &scene.image_before, &scene.image_after, Some(&scene.gt_flow), bins)
    }

    /// Builds a sample from an event stream, its grayscale pair `[h, w]` and
    /// optional ground truth.
    pub fn from_parts(
        stream: &EventStream,
        image_before: &Tensor<f32>,
        image_after: &Tensor<f32>,
        gt_flow: Option<&FlowField<f32>>,
        bins: usize,
    ) -> Result<Self> {
        let (h, w) = (stream.height as usize, stream.width as usize);
        for img in [image_before, image_after] {
            if img.len() != h * w {
                return Err(Error::shape("sample image", &[h, w], img.shape()));
            }
        }
        if let Some(f) = gt_flow {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::shape("sample flow", &[h, w], &[f.height(), f.width()]));
            }
        }
        Ok(Sample {
            volume: build_event_volume(stream, bins)?,
            image_before: image_before.cast::<S>().reshape(&[h, w])?,
            image_after: image_after.cast::<S>().reshape(&[h, w])?,
            gt_flow: gt_flow.map(FlowField::cast),
            event_mask: stream.event_mask(),
        })
    }

    pub fn height(&self) -> usize {
        self.volume.height()
    }

    pub fn width(&self) -> usize {
        self.volume.width()
    }

    pub fn cast<T: Scalar>(&self) -> Sample<T> {
        Sample {
            volume: self.volume.cast(),
            image_before: self.image_before.cast(),
            image_after: self.image_after.cast(),
            gt_flow: self.gt_flow.as_ref().map(FlowField::cast),
            event_mask: self.event_mask.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset<S> {
    pub samples: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(samples: Vec<Sample<S>>) -> Self {
        Dataset { samples }
    }

    pub fn from_scenes(scenes: &[SynthScene], bins: usize) -> Result<Self> {
        Ok(Dataset {
            samples: scenes.iter().map(|s| Sample::from_scene(s, bins)).collect::<Result<_>>()?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `ceil(fraction * len)` samples for validation.
    pub fn split(mut self, fraction: f64) -> (Self, Self) {
        let n_val = ((self.samples.len() as f64) * fraction).ceil() as usize;
        let n_val = n_val.min(self.samples.len());
        let val = self.samples.split_off(self.samples.len() - n_val);
        (self, Dataset { samples: val })
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            samples: self.samples.iter().map(Sample::cast).collect(),
        }
    }
}

/// A joint spatial transform: flips, then `rot90` quarter turns, then crop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise quarter turns in image coordinates, 0..4.
    pub rot90: u8,
    /// `(top, left, height, width)` after flips and rotation.
    pub crop: Option<(usize, usize, usize, usize)>,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Draws a transform for a `height x width` sample.
    pub fn draw(cfg: &TrainConfig, height: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        let hflip = cfg.hflip && rng.gen::<bool>();
        let vflip = cfg.vflip && rng.gen::<bool>();
        let mut rot90 = if cfg.rotate { rng.gen_range(0..4u8) } else { 0 };
        let odd_fits = cfg.crop.map_or(height == width, |(ch, cw)| ch <= width && cw <= height);
        if rot90 % 2 == 1 && !odd_fits {
            rot90 -= 1;
        }
        let (h, w) = if rot90 % 2 == 1 { (width, height) } else { (height, width) };
        let crop = match cfg.crop {
            None => None,
            Some((ch, cw)) => {
                if ch > h || cw > w {
                    return Err(Error::CropTooLarge {
                        crop_h: ch,
                        crop_w: cw,
                        height: h,
                        width: w,
                    });
                }
                Some((rng.gen_range(0..=h - ch), rng.gen_range(0..=w - cw), ch, cw))
            }
        };
        Ok(Augmentation { hflip, vflip, rot90, crop })
    }
}

fn hflip_plane<S: Copy>(p: &[S], h: usize, w: usize) -> Vec<S> {
    (0..h * w).map(|i| p[(i / w) * w + (w - 1 - i % w)]).collect()
}

fn vflip_plane<S: Copy>(p: &[S], h: usize, w: usize) -> Vec<S> {
    (0..h * w).map(|i| p[(h - 1 - i / w) * w + i % w]).collect()
}

/// Moves input pixel `(x, y)` to `(y, w - 1 - x)`; the result is `w x h`.
fn rot90_plane<S: Copy>(p: &[S], h: usize, w: usize) -> Vec<S> {
    let (nh, nw) = (w, h);
    (0..nh * nw)
        .map(|i| {
            let (yo, xo) = (i / nw, i % nw);
            p[xo * w + (w - 1 - yo)]
        })
        .collect()
}

fn crop_plane<S: Copy>(p: &[S], w: usize, top: usize, left: usize, ch: usize, cw: usize) -> Vec<S> {
    (0..ch * cw).map(|i| p[(top + i / cw) * w + left + i % cw]).collect()
}

/// A sample's planes in a uniform layout for joint transforms. Flow planes
/// are the last two entries when present.
struct Planes<S> {
    h: usize,
    w: usize,
    data: Vec<Vec<S>>,
    mask: Vec<bool>,
}

/// Applies the same spatial transform to events, images, flow and mask.
pub fn augment<S: Scalar>(sample: &Sample<S>, aug: &Augmentation) -> Result<Sample<S>> {
    let (h, w) = (sample.height(), sample.width());
    let bins = sample.volume.bins();
    let mut planes: Vec<Vec<S>> = sample.volume.tensor().data().chunks(h * w).map(<[S]>::to_vec).collect();
    planes.push(sample.image_before.data().to_vec());
    planes.push(sample.image_after.data().to_vec());
    let has_flow = sample.gt_flow.is_some();
    if let Some(f) = &sample.gt_flow {
        planes.push(f.u().to_vec());
        planes.push(f.v().to_vec());
    }
    let mut st = Planes {
        h,
        w,
        data: planes,
        mask: sample.event_mask.clone(),
    };
    let n = st.data.len();
    if aug.hflip {
        st.data = st.data.iter().map(|p| hflip_plane(p, st.h, st.w)).collect();
        st.mask = hflip_plane(&st.mask, st.h, st.w);
        if has_flow {
            st.data[n - 2].iter_mut().for_each(|u| *u = -*u);
        }
    }
    if aug.vflip {
        st.data = st.data.iter().map(|p| vflip_plane(p, st.h, st.w)).collect();
        st.mask = vflip_plane(&st.mask, st.h, st.w);
        if has_flow {
            st.data[n - 1].iter_mut().for_each(|v| *v = -*v);
        }
    }
    for _ in 0..aug.rot90 % 4 {
        st.data = st.data.iter().map(|p| rot90_plane(p, st.h, st.w)).collect();
        st.mask = rot90_plane(&st.mask, st.h, st.w);
        std::mem::swap(&mut st.h, &mut st.w);
        if has_flow {
            // (u, v) -> (v, -u)
            let u = std::mem::take(&mut st.data[n - 2]);
            let v = std::mem::take(&mut st.data[n - 1]);
            st.data[n - 2] = v;
            st.data[n - 1] = u.into_iter().map(|x| -x).collect();
        }
    }
    if let Some((top, left, ch, cw)) = aug.crop {
        if top + ch > st.h || left + cw > st.w {
            return Err(Error::CropTooLarge {
                crop_h: ch,
                crop_w: cw,
                height: st.h,
                width: st.w,
            });
        }
        st.data = st.data.iter().map(|p| crop_plane(p, st.w, top, left, ch, cw)).collect();
        st.mask = crop_plane(&st.mask, st.w, top, left, ch, cw);
        st.h = ch;
        st.w = cw;
    }
    let (h, w) = (st.h, st.w);
    let mut it = st.data.into_iter();
    let vol: Vec<S> = it.by_ref().take(2 * bins).flatten().collect();
    let before = it.next().expect("image plane");
    let after = it.next().expect("image plane");
    let gt_flow = if has_flow {
        let u = it.next().expect("flow plane");
        let v = it.next().expect("flow plane");
        Some(FlowField::from_planes(h, w, u, v)?)
    } else {
        None
    };
    Ok(Sample {
        volume: EventVolume::from_tensor(Tensor::from_vec(&[2, bins, h, w], vol)?)?,
        image_before: Tensor::from_vec(&[h, w], before)?,
        image_after: Tensor::from_vec(&[h, w], after)?,
        gt_flow,
        event_mask: st.mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(net: &Network<S>) -> Self {
        let zeros: Vec<Tensor<S>> = net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor<S>], &[Tensor<S>]) {
        (&self.m, &self.v)
    }

    pub fn update(&mut self, net: &mut Network<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", &[self.m.len()], &[grads.len()]));
        }
        self.step += 1;
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let bc1 = S::lit(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::lit(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (S::lit(lr), S::lit(self.eps));
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            grads[i].check_same_shape(&p.value, "adam")?;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        net.clamp_dynamics();
        Ok(())
    }
}

/// Summed per-sample gradients of a batch (or several accumulated batches).
#[derive(Debug, Clone)]
pub struct BatchGrads<S> {
    pub grads: Vec<Tensor<S>>,
    pub loss_sum: f64,
    pub samples: usize,
    pub activity: Activity,
}

impl<S: Scalar> BatchGrads<S> {
    pub fn zeros(net: &Network<S>) -> Self {
        BatchGrads {
            grads: net.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            loss_sum: 0.0,
            samples: 0,
            activity: Activity::default(),
        }
    }

    /// Adds `other` after `self`, keeping sample order.
    pub fn merge(&mut self, other: &BatchGrads<S>) -> Result<()> {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b)?;
        }
        self.loss_sum += other.loss_sum;
        self.samples += other.samples;
        self.activity.merge(&other.activity);
        Ok(())
    }

    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.samples.max(1) as f64
    }

    /// Mean gradient over all accumulated samples.
    pub fn mean_grads(&self) -> Vec<Tensor<S>> {
        let k = S::one() / S::lit(self.samples.max(1) as f64);
        self.grads.iter().map(|g| g.map(|x| x * k)).collect()
    }
}

struct SampleGrads<S> {
    loss: f64,
    grads: Vec<Tensor<S>>,
    activity: Activity,
}

fn diagnostics<S: Scalar>(net: &Network<S>, activity: &Activity) -> String {
    let mut s = String::new();
    for l in 0..activity.lif_spikes.len() {
        let p = net.lif_params(l);
        let _ = write!(
            s,
            "{}: rate={:.4} max|u|={:.4e} v_th={:.4} leak={:.4}; ",
            net.lif_layers()[l].name,
            activity.firing_rate(l),
            activity.lif_max_abs_u[l],
            p.v_th.to_f64_lossy(),
            p.leak.to_f64_lossy()
        );
    }
    if s.is_empty() {
        s.push_str("analog network");
    }
    s.trim_end().to_string()
}

/// Loss value and its flow gradient for one prediction.
pub fn sample_loss<S: Scalar>(sample: &Sample<S>, flow: &FlowField<S>, cfg: &TrainConfig) -> Result<(f64, FlowField<S>)> {
    match cfg.mode {
        LossMode::Supervised => {
            let gt = sample
                .gt_flow
                .as_ref()
                .ok_or_else(|| Error::Mismatch("supervised mode requires ground-truth flow".into()))?;
            let l = supervised_loss(flow, gt)?;
            Ok((l.value, l.grad))
        }
        LossMode::Ssl => {
            let l = total_ssl_loss(&sample.image_before, &sample.image_after, flow, &cfg.loss, Some(&sample.event_mask))?;
            Ok((l.total, l.grad))
        }
    }
}

fn sample_gradients<S: Scalar>(net: &Network<S>, sample: &Sample<S>, cfg: &TrainConfig, step: usize) -> Result<SampleGrads<S>> {
    let out = net.predict(&sample.volume, true)?;
    let (loss, d_flow) = sample_loss(sample, &out.flow, cfg)?;
    if !loss.is_finite() || !out.flow.all_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            diagnostics: diagnostics(net, &out.activity),
        });
    }
    let last = out.accumulators.len() - 1;
    let mut d_acc: Vec<Option<Tensor<S>>> = vec![None; out.accumulators.len()];
    d_acc[last] = Some(net.accumulator_grad(&out.accumulators[last], &d_flow)?);
    let grads = net.backward(out.trace.as_ref().expect("trace retained"), &d_acc)?;
    Ok(SampleGrads {
        loss,
        grads,
        activity: out.activity,
    })
}

/// Summed gradients over `batch`, computed in parallel and reduced in
/// sample order.
pub fn compute_gradients<S: Scalar>(net: &Network<S>, batch: &[&Sample<S>], cfg: &TrainConfig, step: usize) -> Result<BatchGrads<S>> {
    let per_sample: Vec<Result<SampleGrads<S>>> = batch.par_iter().map(|s| sample_gradients(net, s, cfg, step)).collect();
    let mut total = BatchGrads::zeros(net);
    for r in per_sample {
        let sg = r?;
        for (a, b) in total.grads.iter_mut().zip(&sg.grads) {
            a.add_assign(b)?;
        }
        total.loss_sum += sg.loss;
        total.samples += 1;
        total.activity.merge(&sg.activity);
    }
    Ok(total)
}

fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = S::lit(max_norm / norm);
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub loss: f64,
    pub samples: usize,
}

/// Validation summary: flow metrics plus per-layer firing activity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: FlowMetrics,
    /// Per-layer mean spikes per neuron per timestep; empty for analog.
    pub activity: Vec<f64>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_aee: Option<f64>,
    pub val_pe1: Option<f64>,
    pub val_pe3: Option<f64>,
    pub activity: Vec<f64>,
    pub v_th: Vec<f64>,
    pub leak: Vec<f64>,
}

pub struct Trainer<S: Scalar> {
    pub net: Network<S>,
    pub opt: Adam<S>,
    pub cfg: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(spec: &ModelSpec, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = build_model(spec, cfg.seed)?;
        let opt = Adam::new(&net);
        Ok(Trainer {
            net,
            opt,
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    pub fn from_network(net: Network<S>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(&net);
        Ok(Trainer {
            net,
            opt,
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    /// Applies mean gradients from `acc` with learning rate `lr`.
    pub fn apply(&mut self, acc: &BatchGrads<S>, lr: f64) -> Result<()> {
        let mut g = acc.mean_grads();
        if let Some(c) = self.cfg.max_grad_norm {
            clip_global_norm(&mut g, c);
        }
        self.opt.update(&mut self.net, &g, lr)
    }

    /// One forward/backward/update on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample<S>], lr: f64) -> Result<StepReport> {
        let acc = compute_gradients(&self.net, batch, &self.cfg, self.opt.step as usize)?;
        self.apply(&acc, lr)?;
        Ok(StepReport {
            loss: acc.mean_loss(),
            samples: acc.samples,
        })
    }

    fn rng(&self, epoch: usize, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(((epoch as u64) << 32) | stream);
        rng
    }

    /// Sample order for `epoch`.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut self.rng(epoch, 0));
        order
    }

    /// Runs one epoch over `data` and returns the mean training loss.
    pub fn run_epoch(&mut self, data: &Dataset<S>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let epoch = self.epoch;
        let lr = self.cfg.lr_at(epoch);
        let order = self.epoch_order(epoch, data.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<Sample<S>> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &data.samples[i];
                    let aug = Augmentation::draw(&self.cfg, s.height(), s.width(), &mut self.rng(epoch, i as u64 + 1))?;
                    augment(s, &aug)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample<S>> = batch.iter().collect();
            loss_sum += self.train_step(&refs, lr)?.loss * chunk.len() as f64;
        }
        self.epoch += 1;
        Ok(loss_sum / data.len() as f64)
    }

    pub fn evaluate(&self, data: &Dataset<S>) -> Result<EvalReport> {
        evaluate(&self.net, data)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    pub fn record(&self, train_loss: f64, lr: f64, eval: Option<&EvalReport>) -> EpochRecord {
        let lifs = 0..self.net.lif_layers().len();
        EpochRecord {
            epoch: self.epoch,
            lr,
            train_loss,
            val_aee: eval.map(|e| e.metrics.aee),
            val_pe1: eval.map(|e| e.metrics.pe1),
            val_pe3: eval.map(|e| e.metrics.pe3),
            activity: eval.map(|e| e.activity.clone()).unwrap_or_default(),
            v_th: lifs.clone().map(|l| self.net.lif_params(l).v_th.to_f64_lossy()).collect(),
            leak: lifs.map(|l| self.net.lif_params(l).leak.to_f64_lossy()).collect(),
        }
    }
}

/// Flow metrics over samples with ground truth and at least one event;
/// per-sample metrics are averaged with equal weight.
pub fn evaluate<S: Scalar>(net: &Network<S>, data: &Dataset<S>) -> Result<EvalReport> {
    let results: Vec<Result<Option<(FlowMetrics, Activity)>>> = data
        .samples
        .par_iter()
        .map(|s| {
            let Some(gt) = &s.gt_flow else { return Ok(None) };
            if !s.event_mask.iter().any(|&m| m) {
                return Ok(None);
            }
            let out = net.predict(&s.volume, false)?;
            Ok(Some((FlowMetrics::evaluate(&out.flow, gt, &s.event_mask)?, out.activity)))
        })
        .collect();
    let mut metrics = Vec::new();
    let mut activity = Activity::default();
    for r in results {
        if let Some((m, a)) = r? {
            metrics.push(m);
            activity.merge(&a);
        }
    }
    if metrics.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rates = (0..activity.lif_spikes.len()).map(|l| activity.firing_rate(l)).collect();
    Ok(EvalReport {
        metrics: FlowMetrics::mean(&metrics),
        activity: rates,
    })
}

/// Model manifest, parameters, optimizer moments and progress counters.
/// Serialized as `key=value` manifest lines, a `---` line, then a tensor
/// snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: BTreeMap<String, String>,
    pub tensors: Snapshot,
}

const SEPARATOR: &[u8] = b"---\n";

impl Checkpoint {
    fn capture<S: Scalar>(t: &Trainer<S>) -> Self {
        let mut manifest = t.net.spec().to_manifest();
        manifest.extend(t.cfg.to_manifest());
        manifest.insert("train.precision".into(), S::DTYPE.name().into());
        manifest.insert("state.epoch".into(), t.epoch.to_string());
        manifest.insert("state.step".into(), t.opt.step.to_string());
        manifest.insert("state.init_seed".into(), t.net.seed().to_string());
        let mut tensors = Snapshot::new();
        let (m, v) = t.opt.moments();
        for (i, name) in t.net.param_names().iter().enumerate() {
            tensors.insert(format!("param/{name}"), &t.net.params()[i].value);
            tensors.insert(format!("adam.m/{name}"), &m[i]);
            tensors.insert(format!("adam.v/{name}"), &v[i]);
        }
        Checkpoint { manifest, tensors }
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks {key:?}")))
    }

    pub fn precision(&self) -> Result<DType> {
        match self.get("train.precision")? {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown precision {other:?}"))),
        }
    }

    pub fn epoch(&self) -> Result<usize> {
        parse_value("state.epoch", self.get("state.epoch")?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let m: BTreeMap<String, String> = self
            .manifest
            .iter()
            .filter(|(k, _)| CONFIG_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        RunConfig::from_map(&m)
    }

    /// Rebuilds the network with the stored parameters.
    pub fn network<S: Scalar>(&self) -> Result<Network<S>> {
        let spec = ModelSpec::from_manifest(&self.manifest)?;
        let seed = parse_value("state.init_seed", self.get("state.init_seed")?)?;
        let mut net = build_model::<S>(&spec, seed)?;
        let names: Vec<String> = net.param_names().to_vec();
        for (i, name) in names.iter().enumerate() {
            let t = self.tensors.get::<S>(&format!("param/{name}"))?;
            t.check_same_shape(&net.params()[i].value, "checkpoint parameter")?;
            net.params_mut()[i].value = t;
        }
        Ok(net)
    }

    /// Restores the full training state for resumption.
    pub fn trainer<S: Scalar>(&self) -> Result<Trainer<S>> {
        let cfg = self.run_config()?.train;
        let net = self.network::<S>()?;
        let mut opt = Adam::new(&net);
        opt.step = parse_value("state.step", self.get("state.step")?)?;
        for (i, name) in net.param_names().iter().enumerate() {
            opt.m[i] = self.tensors.get::<S>(&format!("adam.m/{name}"))?;
            opt.v[i] = self.tensors.get::<S>(&format!("adam.v/{name}"))?;
        }
        Ok(Trainer {
            net,
            opt,
            cfg,
            epoch: self.epoch()?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in &self.manifest {
            out.extend_from_slice(format!("{k}={v}\n").as_bytes());
        }
        out.extend_from_slice(SEPARATOR);
        out.extend_from_slice(&self.tensors.to_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut manifest = BTreeMap::new();
        let mut pos = 0;
        loop {
            let rest = &buf[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("checkpoint manifest is not terminated by ---".into()))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("checkpoint manifest is not utf-8".into()))?;
            pos += end + 1;
            if line == "---" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            manifest.insert(k.to_string(), v.to_string());
        }
        Ok(Checkpoint {
            manifest,
            tensors: Snapshot::from_bytes(&buf[pos..])?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Append one JSON line per epoch here.
    pub log_path: Option<PathBuf>,
    /// Overwrite this checkpoint after every epoch.
    pub checkpoint_path: Option<PathBuf>,
}

pub struct FitOutcome<S: Scalar> {
    pub trainer: Trainer<S>,
    pub log: Vec<EpochRecord>,
    pub checkpoint: Checkpoint,
    /// Validation report of the untrained model, if a validation set was given.
    pub initial: Option<EvalReport>,
}

/// Trains from `trainer`'s current epoch up to `cfg.epochs`, evaluating on
/// `val` after each epoch.
pub fn fit_from<S: Scalar>(
    mut trainer: Trainer<S>,
    train: &Dataset<S>,
    val: &Dataset<S>,
    opts: &FitOptions,
) -> Result<FitOutcome<S>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if trainer.cfg.mode == LossMode::Supervised && train.samples.iter().any(|s| s.gt_flow.is_none()) {
        return Err(Error::Mismatch("supervised mode requires ground-truth flow for every sample".into()));
    }
    let mut log_file = match &opts.log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let initial = if val.is_empty() { None } else { Some(trainer.evaluate(val)?) };
    let mut log = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let lr = trainer.cfg.lr_at(trainer.epoch);
        let loss = trainer.run_epoch(train)?;
        let eval = if val.is_empty() { None } else { Some(trainer.evaluate(val)?) };
        let rec = trainer.record(loss, lr, eval.as_ref());
        if let (Some(f), Some(p)) = (log_file.as_mut(), &opts.log_path) {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        log.push(rec);
        if let Some(p) = &opts.checkpoint_path {
            trainer.checkpoint().save(p)?;
        }
        if let (Some(target), Some(e)) = (trainer.cfg.target_aee, &eval) {
            if e.metrics.aee <= target {
                break;
            }
        }
    }
    let checkpoint = trainer.checkpoint();
    if let Some(p) = &opts.checkpoint_path {
        checkpoint.save(p)?;
    }
    Ok(FitOutcome {
        trainer,
        log,
        checkpoint,
        initial,
    })
}

pub fn fit<S: Scalar>(
    train: &Dataset<S>,
    val: &Dataset<S>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    opts: &FitOptions,
) -> Result<FitOutcome<S>> {
    fit_from(Trainer::new(spec, cfg)?, train, val, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Pattern, SceneParams};

    fn sample(seed: u64) -> Sample<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, bins) = (6, 8, 4);
        let vol = Tensor::from_fn(&[2, bins, h, w], |_| rng.gen_range(0.0..2.0));
        Sample {
            volume: EventVolume::from_tensor(vol).unwrap(),
            image_before: Tensor::from_fn(&[h, w], |_| rng.gen()),
            image_after: Tensor::from_fn(&[h, w], |_| rng.gen()),
            gt_flow: Some(FlowField::from_tensor(Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-3.0..3.0))).unwrap()),
            event_mask: (0..h * w).map(|_| rng.gen()).collect(),
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::ssl();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(9), 1e-4);
        assert!((cfg.lr_at(10) - 1e-4 * 0.7).abs() < 1e-20);
        assert!((cfg.lr_at(20) - 1e-4 * 0.49).abs() < 1e-19);
        assert_eq!(TrainConfig::supervised().lr_at(40), 1e-4);
    }

    #[test]
    fn identity_augmentation() {
        let s = sample(1);
        assert_eq!(augment(&s, &Augmentation::identity()).unwrap(), s);
    }

    #[test]
    fn hflip_negates_u() {
        let s = sample(2);
        let a = augment(&s, &Augmentation { hflip: true, ..Default::default() }).unwrap();
        let (gs, ga) = (s.gt_flow.as_ref().unwrap(), a.gt_flow.as_ref().unwrap());
        let (h, w) = (s.height(), s.width());
        for y in 0..h {
            for x in 0..w {
                let (u, v) = gs.at(x, y);
                assert_eq!(ga.at(w - 1 - x, y), (-u, v));
                assert_eq!(a.event_mask[y * w + w - 1 - x], s.event_mask[y * w + x]);
            }
        }
    }

    #[test]
    fn rot90_moves_pixels_and_flow() {
        let s = sample(3);
        let a = augment(&s, &Augmentation { rot90: 1, ..Default::default() }).unwrap();
        let (h, w) = (s.height(), s.width());
        assert_eq!((a.height(), a.width()), (w, h));
        let (gs, ga) = (s.gt_flow.as_ref().unwrap(), a.gt_flow.as_ref().unwrap());
        for y in 0..h {
            for x in 0..w {
                let (u, v) = gs.at(x, y);
                assert_eq!(ga.at(y, w - 1 - x), (v, -u));
                assert_eq!(a.image_before.data()[(w - 1 - x) * h + y], s.image_before.data()[y * w + x]);
            }
        }
        let back = (0..3).fold(a, |acc, _| augment(&acc, &Augmentation { rot90: 1, ..Default::default() }).unwrap());
        assert_eq!(back, s);
    }

    #[test]
    fn crop_too_large() {
        let s = sample(4);
        let mut cfg = TrainConfig::supervised();
        cfg.crop = Some((7, 8));
        let err = Augmentation::draw(&cfg, s.height(), s.width(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::CropTooLarge { .. }));
    }

    #[test]
    fn config_round_trip_and_strictness() {
        let text = "model.kind=unet\nmodel.base_channels=8\nloss.mode=supervised\ntrain.epochs=3 # short\ntrain.crop=64x64\nseed=5\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.crop, Some((64, 64)));
        assert_eq!(cfg.train.mode, LossMode::Supervised);
        assert_eq!(cfg.train.lr_decay, 1.0);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(RunConfig::parse("train.epoch=3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("seed=1\nseed=2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("train.lr=fast"), Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let scene = crate::events::synth_scene(&SceneParams::new(Pattern::Texture, (1.5, 0.5), 16, 16, 0.0, 0.15, 2)).unwrap();
        let s = Sample::<f64>::from_scene(&scene, 4).unwrap();
        let mut spec = ModelSpec::unet(2, Neuron::Spiking);
        spec.timesteps = 2;
        let mut cfg = TrainConfig::supervised();
        cfg.crop = None;
        let mut t = Trainer::<f64>::new(&spec, &cfg).unwrap();
        let before = t.net.params().to_vec();
        let r = t.train_step(&[&s], 0.0).unwrap();
        assert!(r.loss.is_finite() && r.loss > 0.0);
        assert_eq!(t.net.params(), &before[..]);
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let mut spec = ModelSpec::unet(2, Neuron::Analog);
        spec.timesteps = 2;
        let t = Trainer::<f32>::new(&spec, &TrainConfig::ssl()).unwrap();
        let ck = t.checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.network::<f32>().unwrap().params(), t.net.params());
        assert!(Checkpoint::from_bytes(b"model.kind=unet\n").is_err());
    }
}
