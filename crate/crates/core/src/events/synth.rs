//! Synthetic event scenes: a pattern translating and rotating over one frame
//! interval, with events emitted wherever a pixel's log intensity crosses a
//! multiple of the contrast threshold.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    /// Bright vertical bar on a dark static background.
    Bar,
    /// Bright disc on a dark static background.
    Disc,
    /// Full-frame smoothed checkerboard.
    Checkerboard,
    /// Full-frame sinusoidal grating.
    Grating,
    /// Full-frame random band-limited texture.
    Texture,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [Pattern::Bar, Pattern::Disc, Pattern::Checkerboard, Pattern::Grating, Pattern::Texture];

    /// Patterns that cover the whole frame, so every pixel moves.
    pub const FULL_FRAME: [Pattern; 3] = [Pattern::Checkerboard, Pattern::Grating, Pattern::Texture];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Bar => "bar",
            Pattern::Disc => "disc",
            Pattern::Checkerboard => "checkerboard",
            Pattern::Grating => "grating",
            Pattern::Texture => "texture",
        }
    }

    fn is_object(self) -> bool {
        matches!(self, Pattern::Bar | Pattern::Disc)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidScene(format!("unknown pattern {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub pattern: Pattern,
    /// Translation in pixels per frame interval.
    pub velocity: (f64, f64),
    /// Rotation about the image centre in radians per frame interval.
    pub rotation: f64,
    pub width: usize,
    pub height: usize,
    /// Background noise events per pixel per interval.
    pub noise_rate: f64,
    /// Log-intensity contrast threshold.
    pub theta: f64,
    /// Pattern contrast in `[0, 1]`; 0 gives a uniform image.
    pub contrast: f64,
    pub seed: u64,
    pub duration_us: u64,
    /// Temporal samples per interval for crossing detection; 0 picks one
    /// from the maximum displacement.
    pub substeps: usize,
}

impl SceneParams {
    pub fn new(pattern: Pattern, velocity: (f64, f64), height: usize, width: usize, noise_rate: f64, theta: f64, seed: u64) -> Self {
        SceneParams {
            pattern,
            velocity,
            rotation: 0.0,
            width,
            height,
            noise_rate,
            theta,
            contrast: 1.0,
            seed,
            duration_us: 50_000,
            substeps: 0,
        }
    }

    fn centre(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    fn max_displacement(&self) -> f64 {
        let (cx, cy) = self.centre();
        let speed = self.velocity.0.hypot(self.velocity.1);
        speed + self.rotation.abs() * cx.hypot(cy)
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width > u16::MAX as usize || self.height > u16::MAX as usize {
            return Err(Error::InvalidScene(format!("size {}x{}", self.height, self.width)));
        }
        if !(self.theta > 0.0) {
            return Err(Error::InvalidScene(format!("theta must be positive, got {}", self.theta)));
        }
        let limit = self.width.min(self.height) as f64 / 4.0;
        let speed = self.velocity.0.hypot(self.velocity.1);
        if !(speed <= limit) {
            return Err(Error::InvalidScene(format!("speed {speed} exceeds {limit} px per interval")));
        }
        if !(0.0..=1.0).contains(&self.contrast) || !(self.noise_rate >= 0.0) || !self.rotation.is_finite() {
            return Err(Error::InvalidScene("contrast, noise rate or rotation out of range".into()));
        }
        if self.duration_us == 0 {
            return Err(Error::InvalidScene("duration must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub stream: EventStream,
    /// Intensities in `[0, 1]`, shape `[h, w]`.
    pub image_before: Tensor<f32>,
    pub image_after: Tensor<f32>,
    pub gt_flow: FlowField<f32>,
    pub params: SceneParams,
}

/// Pattern signal in `[-1, 1]` over continuous pattern coordinates.
enum Signal {
    Bar { cx: f64, half_width: f64 },
    Disc { cx: f64, cy: f64, radius: f64 },
    Checker { cell: f64, ox: f64, oy: f64 },
    Waves { components: Vec<(f64, f64, f64, f64)>, gain: f64 },
}

impl Signal {
    fn new(p: &SceneParams, rng: &mut ChaCha8Rng) -> Self {
        let (cx, cy) = p.centre();
        match p.pattern {
            Pattern::Bar => Signal::Bar { cx, half_width: 3.0 },
            Pattern::Disc => Signal::Disc {
                cx,
                cy,
                radius: p.width.min(p.height) as f64 / 5.0,
            },
            Pattern::Checkerboard => Signal::Checker {
                cell: 8.0,
                ox: rng.gen_range(0.0..16.0),
                oy: rng.gen_range(0.0..16.0),
            },
            Pattern::Grating => {
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let wavelength: f64 = rng.gen_range(8.0..16.0);
                let k = std::f64::consts::TAU / wavelength;
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                Signal::Waves {
                    components: vec![(k * angle.cos(), k * angle.sin(), phase, 1.0)],
                    gain: 1.0,
                }
            }
            Pattern::Texture => {
                let components = (0..8)
                    .map(|_| {
                        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        let wavelength: f64 = rng.gen_range(8.0..24.0);
                        let k = std::f64::consts::TAU / wavelength;
                        (k * angle.cos(), k * angle.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.5..1.0))
                    })
                    .collect();
                Signal::Waves { components, gain: 0.8 }
            }
        }
    }

    fn eval(&self, qx: f64, qy: f64) -> f64 {
        match self {
            Signal::Bar { cx, half_width } => (half_width - (qx - cx).abs()).clamp(-1.0, 1.0),
            Signal::Disc { cx, cy, radius } => (radius - (qx - cx).hypot(qy - cy)).clamp(-1.0, 1.0),
            Signal::Checker { cell, ox, oy } => {
                let a = std::f64::consts::PI * (qx + ox) / cell;
                let b = std::f64::consts::PI * (qy + oy) / cell;
                (3.0 * a.sin() * b.sin()).clamp(-1.0, 1.0)
            }
            Signal::Waves { components, gain } => {
                let s: f64 = components.iter().map(|&(kx, ky, ph, a)| a * (kx * qx + ky * qy + ph).sin()).sum();
                (gain * s).tanh()
            }
        }
    }
}

struct Motion {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    omega: f64,
}

impl Motion {
    /// Pattern coordinate seen by pixel `(x, y)` at normalized time `s`.
    fn source(&self, x: f64, y: f64, s: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx - self.vx * s, y - self.cy - self.vy * s);
        let (sin, cos) = (-self.omega * s).sin_cos();
        (self.cx + cos * dx - sin * dy, self.cy + sin * dx + cos * dy)
    }

    /// Displacement of the pattern point under pixel `(x, y)` over one interval.
    fn displacement(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (sin, cos) = self.omega.sin_cos();
        (self.cx + self.vx + cos * dx - sin * dy - x, self.cy + self.vy + sin * dx + cos * dy - y)
    }
}

pub fn synth_scene(params: &SceneParams) -> Result<SynthScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let signal = Signal::new(params, &mut rng);
    let (cx, cy) = params.centre();
    let motion = Motion {
        cx,
        cy,
        vx: params.velocity.0,
        vy: params.velocity.1,
        omega: params.rotation,
    };
    let (w, h) = (params.width, params.height);
    let intensity = |x: f64, y: f64, s: f64| {
        let (qx, qy) = motion.source(x, y, s);
        0.5 + 0.4 * params.contrast * signal.eval(qx, qy)
    };
    let substeps = if params.substeps > 0 {
        params.substeps
    } else {
        ((4.0 * params.max_displacement()).ceil() as usize).max(16)
    };
    let duration = params.duration_us as f64;
    let moving = params.max_displacement() > 0.0;

    let mut events = Vec::new();
    let mut image_before = Tensor::zeros(&[h, w]);
    let mut image_after = Tensor::zeros(&[h, w]);
    let mut gt_flow = FlowField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let i = y * w + x;
            let i0 = intensity(fx, fy, 0.0);
            image_before.data_mut()[i] = i0 as f32;
            image_after.data_mut()[i] = intensity(fx, fy, 1.0) as f32;
            let on_pattern = !params.pattern.is_object() || signal.eval(fx, fy) > 0.0;
            if on_pattern {
                let (u, v) = motion.displacement(fx, fy);
                let (gu, gv) = gt_flow.planes_mut();
                gu[i] = u as f32;
                gv[i] = v as f32;
            }
            if !moving {
                continue;
            }
            let mut reference = i0.ln();
            let mut prev = reference;
            for k in 1..=substeps {
                let s = k as f64 / substeps as f64;
                let cur = intensity(fx, fy, s).ln();
                let s_prev = (k - 1) as f64 / substeps as f64;
                let step = 1.0 / substeps as f64;
                loop {
                    let (level, p) = if cur - reference >= params.theta {
                        (reference + params.theta, Polarity::On)
                    } else if reference - cur >= params.theta {
                        (reference - params.theta, Polarity::Off)
                    } else {
                        break;
                    };
                    let frac = if cur != prev { ((level - prev) / (cur - prev)).clamp(0.0, 1.0) } else { 1.0 };
                    let t = ((s_prev + frac * step) * duration).round() as u64;
                    events.push(Event { x: x as u16, y: y as u16, t, p });
                    reference = level;
                }
                prev = cur;
            }
        }
    }
    // Parametrise gt flow consistently even for zero motion.
    if !moving {
        gt_flow = FlowField::zeros(h, w);
    }
    if params.noise_rate > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let mut budget = params.noise_rate;
                while budget > 0.0 {
                    let p_here = budget.min(1.0);
                    budget -= 1.0;
                    if rng.gen::<f64>() < p_here {
                        let t = rng.gen_range(0..=params.duration_us);
                        let p = if rng.gen::<bool>() { Polarity::On } else { Polarity::Off };
                        events.push(Event { x: x as u16, y: y as u16, t, p });
                    }
                }
            }
        }
    }
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p.index()));
    if events.is_empty() && moving {
        return Err(Error::NoEvents);
    }
    Ok(SynthScene {
        stream: EventStream::new(w as u16, h as u16, events),
        image_before,
        image_after,
        gt_flow,
        params: params.clone(),
    })
}

/// Randomized scene collection for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSampler {
    pub height: usize,
    pub width: usize,
    pub patterns: Vec<Pattern>,
    /// Translation speeds are drawn from `[max_speed / 4, max_speed]`.
    pub max_speed: f64,
    /// Rotation rates are drawn from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    /// Fraction of scenes that also rotate.
    pub rotating_fraction: f64,
    pub theta: f64,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SceneSampler {
    pub fn new(height: usize, width: usize, seed: u64) -> Self {
        SceneSampler {
            height,
            width,
            patterns: vec![Pattern::Checkerboard, Pattern::Texture],
            max_speed: 4.0,
            max_rotation: 0.04,
            rotating_fraction: 0.5,
            theta: 0.15,
            noise_rate: 0.0,
            seed,
        }
    }

    /// Parameters of scene `index`; a pure function of `(seed, index)`.
    pub fn params(&self, index: usize) -> SceneParams {
        self.params_attempt(index, 0)
    }

    fn params_attempt(&self, index: usize, attempt: u32) -> SceneParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((attempt as u64) << 40) | (index as u64 + 1));
        let pattern = self.patterns[rng.gen_range(0..self.patterns.len())];
        let speed = rng.gen_range(self.max_speed / 4.0..=self.max_speed);
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let rotation = if rng.gen::<f64>() < self.rotating_fraction && self.max_rotation > 0.0 {
            rng.gen_range(-self.max_rotation..=self.max_rotation)
        } else {
            0.0
        };
        let mut p = SceneParams::new(
            pattern,
            (speed * angle.cos(), speed * angle.sin()),
            self.height,
            self.width,
            self.noise_rate,
            self.theta,
            rng.gen(),
        );
        p.rotation = rotation;
        p
    }

    /// Scene `index`. Draws that produce no events are redrawn.
    pub fn scene(&self, index: usize) -> Result<SynthScene> {
        let mut last = Error::NoEvents;
        for attempt in 0..16 {
            match synth_scene(&self.params_attempt(index, attempt)) {
                Err(Error::NoEvents) => last = Error::NoEvents,
                other => return other,
            }
        }
        Err(last)
    }

    pub fn scenes(&self, count: usize) -> Result<Vec<SynthScene>> {
        (0..count).into_par_iter().map(|i| self.scene(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_pattern_gives_empty_stream() {
        let p = SceneParams::new(Pattern::Texture, (0.0, 0.0), 16, 16, 0.0, 0.2, 1);
        let s = synth_scene(&p).unwrap();
        assert!(s.stream.is_empty());
        assert_eq!(s.gt_flow.max_magnitude(), 0.0);
    }

    #[test]
    fn bar_polarity_on_leading_and_off_on_trailing_edge() {
        let p = SceneParams::new(Pattern::Bar, (2.0, 0.0), 16, 32, 0.0, 0.2, 3);
        let s = synth_scene(&p).unwrap();
        let cx = (32.0 - 1.0) / 2.0;
        assert!(!s.stream.is_empty());
        for e in &s.stream.events {
            match e.p {
                Polarity::On => assert!(e.x as f64 > cx, "ON event at x={}", e.x),
                Polarity::Off => assert!((e.x as f64) < cx, "OFF event at x={}", e.x),
            }
        }
        for x in 0..32 {
            let (u, v) = s.gt_flow.at(x, 8);
            if (x as f64 - cx).abs() < 2.5 {
                assert!((u - 2.0).abs() < 1e-6 && v.abs() < 1e-6);
            } else if (x as f64 - cx).abs() > 3.5 {
                assert_eq!((u, v), (0.0, 0.0));
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let p = SceneParams::new(Pattern::Checkerboard, (1.0, 1.0), 24, 24, 0.01, 0.2, 42);
        let a = synth_scene(&p).unwrap();
        let b = synth_scene(&p).unwrap();
        assert_eq!(super::super::encode_events(&a.stream), super::super::encode_events(&b.stream));
        assert_eq!(a.image_after, b.image_after);
    }

    #[test]
    fn zero_contrast_produces_no_events_error() {
        let mut p = SceneParams::new(Pattern::Grating, (1.0, 0.0), 16, 16, 0.0, 0.2, 0);
        p.contrast = 0.0;
        assert!(matches!(synth_scene(&p), Err(Error::NoEvents)));
        assert_eq!(Error::NoEvents.to_string(), "no events generated");
    }

    #[test]
    fn rejects_excessive_speed_and_bad_theta() {
        let p = SceneParams::new(Pattern::Bar, (5.0, 0.0), 16, 16, 0.0, 0.2, 0);
        assert!(synth_scene(&p).is_err());
        let p = SceneParams::new(Pattern::Bar, (1.0, 0.0), 16, 16, 0.0, 0.0, 0);
        assert!(synth_scene(&p).is_err());
    }

    #[test]
    fn gt_flow_matches_rigid_motion() {
        let mut p = SceneParams::new(Pattern::Texture, (1.5, -0.5), 20, 30, 0.0, 0.2, 9);
        p.rotation = 0.03;
        let s = synth_scene(&p).unwrap();
        let (cx, cy) = (14.5, 9.5);
        for (x, y) in [(0usize, 0usize), (29, 19), (7, 13)] {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (sn, cs) = 0.03f64.sin_cos();
            let eu = cx + 1.5 + cs * dx - sn * dy - x as f64;
            let ev = cy - 0.5 + sn * dx + cs * dy - y as f64;
            let (u, v) = s.gt_flow.at(x, y);
            assert!((u as f64 - eu).abs() < 1e-5 && (v as f64 - ev).abs() < 1e-5);
        }
    }

    #[test]
    fn after_image_is_warped_before_image() {
        // Brightness constancy: I_after(x + flow) = I_before(x) for pure translation.
        let p = SceneParams::new(Pattern::Grating, (2.0, 0.0), 16, 16, 0.0, 0.2, 5);
        let s = synth_scene(&p).unwrap();
        for y in 0..16 {
            for x in 0..14 {
                let a = s.image_before.data()[y * 16 + x];
                let b = s.image_after.data()[y * 16 + x + 2];
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sampler_is_pure_function_of_index() {
        let s = SceneSampler::new(32, 32, 7);
        assert_eq!(s.params(3), s.params(3));
        assert_ne!(s.params(3), s.params(4));
        let p = s.params(0);
        assert!(p.velocity.0.hypot(p.velocity.1) <= 4.0 + 1e-12);
    }
}
