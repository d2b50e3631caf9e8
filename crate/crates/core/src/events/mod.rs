//! Asynchronous event streams and their voxelized network input.

mod io;
pub mod synth;

pub use io::{read_events, write_events, decode_events, encode_events};
pub use synth::{synth_scene, Pattern, SceneParams, SceneSampler, SynthScene};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    On,
    Off,
}

impl Polarity {
    /// Slice index inside an [`EventVolume`].
    pub fn index(self) -> usize {
        match self {
            Polarity::On => 0,
            Polarity::Off => 1,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }
}

/// One address-event: pixel column, row, timestamp in microseconds, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub p: Polarity,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

impl EventStream {
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Self {
        EventStream { width, height, events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks bounds and timestamp ordering.
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0u64;
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::EventOutOfBounds {
                    index: i,
                    x: e.x,
                    y: e.y,
                    width: self.width,
                    height: self.height,
                });
            }
            if i > 0 && e.t < prev {
                return Err(Error::UnsortedTimestamps {
                    index: i,
                    previous: prev,
                    current: e.t,
                });
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn count(&self, p: Polarity) -> usize {
        self.events.iter().filter(|e| e.p == p).count()
    }

    /// Per-pixel mask of pixels that saw at least one event, row-major.
    pub fn event_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.width as usize * self.height as usize];
        for e in &self.events {
            mask[e.y as usize * self.width as usize + e.x as usize] = true;
        }
        mask
    }
}

/// Maps timestamps onto `[0, bins - 1]` using the first and last event.
///
/// A stream whose events all share one timestamp maps every event to 0.
pub fn normalize_timestamps(stream: &EventStream, bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(Error::InvalidBins(bins));
    }
    let (first, last) = match (stream.events.first(), stream.events.last()) {
        (Some(f), Some(l)) => (f.t, l.t),
        _ => return Err(Error::EmptyStream),
    };
    if last == first {
        return Ok(vec![0.0; stream.events.len()]);
    }
    let span = (last - first) as f64;
    let scale = (bins - 1) as f64;
    Ok(stream
        .events
        .iter()
        .map(|e| scale * (e.t - first) as f64 / span)
        .collect())
}

/// Triangular bilinear kernel `max(0, 1 - |a|)`.
pub fn bilinear_kernel(a: f64) -> f64 {
    (1.0 - a.abs()).max(0.0)
}

/// Unsigned per-polarity voxel grid of shape `[2, bins, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventVolume<S = f32> {
    data: Tensor<S>,
}

impl<S: Scalar> EventVolume<S> {
    pub fn zeros(bins: usize, height: usize, width: usize) -> Self {
        EventVolume {
            data: Tensor::zeros(&[2, bins, height, width]),
        }
    }

    pub fn from_tensor(data: Tensor<S>) -> Result<Self> {
        data.dims4()?;
        if data.shape()[0] != 2 {
            return Err(Error::shape("event volume", &[2, 0, 0, 0], data.shape()));
        }
        Ok(EventVolume { data })
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.data
    }

    pub fn slice(&self, p: Polarity, bin: usize) -> &[S] {
        self.data.plane(p.index(), bin)
    }

    pub fn slice_mut(&mut self, p: Polarity, bin: usize) -> &mut [S] {
        self.data.plane_mut(p.index(), bin)
    }

    pub fn get(&self, p: Polarity, bin: usize, y: usize, x: usize) -> S {
        self.slice(p, bin)[y * self.width() + x]
    }

    /// Total deposited mass of one polarity.
    pub fn mass(&self, p: Polarity) -> f64 {
        (0..self.bins())
            .flat_map(|b| self.slice(p, b).iter())
            .map(|x| x.to_f64_lossy())
            .sum()
    }

    /// Bins as input channels, `[1, 2 * bins, h, w]`, for analog networks.
    pub fn as_channels(&self) -> Tensor<S> {
        let (b, h, w) = (self.bins(), self.height(), self.width());
        self.data.clone().reshape(&[1, 2 * b, h, w]).expect("same length")
    }

    pub fn cast<T: Scalar>(&self) -> EventVolume<T> {
        EventVolume { data: self.data.cast() }
    }
}

/// Bilinear temporal voxelization with unit-magnitude deposits per polarity.
pub fn build_event_volume<S: Scalar>(stream: &EventStream, bins: usize) -> Result<EventVolume<S>> {
    if bins < 2 || bins % 2 != 0 {
        return Err(Error::InvalidBins(bins));
    }
    stream.validate()?;
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut volume = EventVolume::zeros(bins, h, w);
    if stream.is_empty() {
        return Ok(volume);
    }
    let times = normalize_timestamps(stream, bins)?;
    for (e, &ts) in stream.events.iter().zip(&times) {
        let pixel = e.y as usize * w + e.x as usize;
        let lower = (ts.floor() as usize).min(bins - 1);
        for bin in [lower, lower + 1] {
            if bin >= bins {
                continue;
            }
            let k = bilinear_kernel(bin as f64 - ts);
            if k > 0.0 {
                volume.slice_mut(e.p, bin)[pixel] += S::lit(k);
            }
        }
    }
    Ok(volume)
}

/// Per-timestep 4-channel input `[T, 4, h, w]` with channels
/// (former ON, former OFF, latter ON, latter OFF), `T = bins / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedInput<S = f32> {
    frames: Tensor<S>,
}

impl<S: Scalar> GroupedInput<S> {
    pub fn from_tensor(frames: Tensor<S>) -> Result<Self> {
        let (_, c, _, _) = frames.dims4()?;
        if c != 4 {
            return Err(Error::shape("grouped input", &[0, 4, 0, 0], frames.shape()));
        }
        Ok(GroupedInput { frames })
    }

    pub fn timesteps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.frames
    }

    /// Frame `t` as a `[1, 4, h, w]` tensor.
    pub fn frame(&self, t: usize) -> Tensor<S> {
        let (h, w) = (self.height(), self.width());
        let n = 4 * h * w;
        Tensor::from_vec(&[1, 4, h, w], self.frames.data()[t * n..(t + 1) * n].to_vec()).expect("frame length")
    }
}

/// Rearranges a volume into former/latter groups. Lossless.
pub fn group_former_latter<S: Scalar>(volume: &EventVolume<S>) -> Result<GroupedInput<S>> {
    let bins = volume.bins();
    if bins % 2 != 0 || bins == 0 {
        return Err(Error::InvalidBins(bins));
    }
    let t_steps = bins / 2;
    let (h, w) = (volume.height(), volume.width());
    let mut data = Vec::with_capacity(2 * bins * h * w);
    for t in 0..t_steps {
        for (p, bin) in [(Polarity::On, t), (Polarity::Off, t), (Polarity::On, t_steps + t), (Polarity::Off, t_steps + t)] {
            data.extend_from_slice(volume.slice(p, bin));
        }
    }
    GroupedInput::from_tensor(Tensor::from_vec(&[t_steps, 4, h, w], data)?)
}

/// Inverse of [`group_former_latter`].
pub fn ungroup<S: Scalar>(input: &GroupedInput<S>) -> EventVolume<S> {
    let t_steps = input.timesteps();
    let (h, w) = (input.height(), input.width());
    let mut volume = EventVolume::zeros(2 * t_steps, h, w);
    for t in 0..t_steps {
        for (c, (p, bin)) in [(Polarity::On, t), (Polarity::Off, t), (Polarity::On, t_steps + t), (Polarity::Off, t_steps + t)]
            .into_iter()
            .enumerate()
        {
            volume.slice_mut(p, bin).copy_from_slice(input.frames.plane(t, c));
        }
    }
    volume
}
