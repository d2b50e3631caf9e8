//! Leaky-integrate-and-fire neurons with layer-wise learnable threshold and
//! leak, an arctangent-style surrogate spike derivative, and the
//! through-time backward pass.
//!
//! Forward dynamics for one layer at timestep `t`:
//!
//! ```text
//! u[t] = leak * u[t-1] + I[t] - v_th * o[t-1]     (soft reset)
//! z[t] = u[t] / v_th - 1
//! o[t] = 1 if z[t] > 0 else 0
//! ```
//!
//! The backward pass propagates membrane credit through `u[t-1]` (factor
//! `leak`). Spikes entering the reset term are treated as constants.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lower bound applied to thresholds after every optimizer step.
pub const MIN_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetMode {
    /// Subtract the threshold after a spike.
    #[default]
    Soft,
    /// Zero the membrane after a spike.
    Hard,
}

impl ResetMode {
    pub fn name(self) -> &'static str {
        match self {
            ResetMode::Soft => "soft",
            ResetMode::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft" => Some(ResetMode::Soft),
            "hard" => Some(ResetMode::Hard),
            _ => None,
        }
    }
}

/// Dynamics shared by every layer of a network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    /// Surrogate width.
    pub gamma: f64,
    pub reset: ResetMode,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            gamma: 10.0,
            reset: ResetMode::Soft,
        }
    }
}

/// Per-layer learnable threshold and leak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams<S> {
    pub v_th: S,
    pub leak: S,
}

impl<S: Scalar> LifParams<S> {
    pub fn new(v_th: S, leak: S) -> Self {
        LifParams { v_th, leak }
    }

    /// Projects onto `v_th >= MIN_THRESHOLD`, `0 < leak <= 1`.
    pub fn clamped(self) -> Self {
        let min_leak = S::lit(1e-6);
        LifParams {
            v_th: self.v_th.max(S::lit(MIN_THRESHOLD)),
            leak: self.leak.max(min_leak).min(S::one()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState<S> {
    pub u: Tensor<S>,
    pub o_prev: Tensor<S>,
}

impl<S: Scalar> LifState<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        LifState {
            u: Tensor::zeros(shape),
            o_prev: Tensor::zeros(shape),
        }
    }

    pub fn reset(&mut self) {
        self.u.fill(S::zero());
        self.o_prev.fill(S::zero());
    }
}

/// Everything one timestep of one layer leaves behind for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord<S> {
    pub u_prev: Tensor<S>,
    pub o_prev: Tensor<S>,
    pub u: Tensor<S>,
    pub z: Tensor<S>,
    pub o: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrace<S> {
    timesteps: usize,
    steps: Vec<StepRecord<S>>,
}

impl<S: Scalar> SpikeTrace<S> {
    pub fn new(timesteps: usize) -> Self {
        SpikeTrace {
            timesteps,
            steps: Vec::with_capacity(timesteps),
        }
    }

    pub fn push(&mut self, record: StepRecord<S>) {
        self.steps.push(record);
    }

    pub fn steps(&self) -> &[StepRecord<S>] {
        &self.steps
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.timesteps
    }
}

/// Advances one layer by one timestep and returns the step record. The
/// state is updated in place.
pub fn lif_step<S: Scalar>(
    state: &mut LifState<S>,
    current: &Tensor<S>,
    params: &LifParams<S>,
    reset: ResetMode,
) -> Result<StepRecord<S>> {
    state.u.check_same_shape(current, "lif_step")?;
    if !current.all_finite() {
        return Err(Error::NonFiniteCurrent { layer: 0 });
    }
    let u_prev = state.u.clone();
    let o_prev = state.o_prev.clone();
    let inv_th = S::one() / params.v_th;
    let mut z = Tensor::zeros(current.shape());
    let mut o = Tensor::zeros(current.shape());
    let u = state.u.data_mut();
    for i in 0..u.len() {
        let decayed = params.leak * u_prev.data()[i];
        u[i] = match reset {
            ResetMode::Soft if o_prev.data()[i] != S::zero() => {
                decayed + current.data()[i] - params.v_th * o_prev.data()[i]
            }
            ResetMode::Soft => decayed + current.data()[i],
            ResetMode::Hard => decayed * (S::one() - o_prev.data()[i]) + current.data()[i],
        };
        let zi = u[i] * inv_th - S::one();
        z.data_mut()[i] = zi;
        o.data_mut()[i] = if zi > S::zero() { S::one() } else { S::zero() };
    }
    state.o_prev = o.clone();
    Ok(StepRecord {
        u_prev,
        o_prev,
        u: state.u.clone(),
        z,
        o,
    })
}

/// Surrogate spike derivative `do/dz`: `1 / (1 + gamma z^2)` inside
/// `|z| < 1`, zero outside.
pub fn surrogate_grad<S: Scalar>(z: S, gamma: S) -> S {
    if S::one() - z.abs() > S::zero() {
        S::one() / (S::one() + gamma * z * z)
    } else {
        S::zero()
    }
}

pub fn surrogate_grad_tensor<S: Scalar>(z: &Tensor<S>, gamma: S) -> Tensor<S> {
    z.map(|v| surrogate_grad(v, gamma))
}

/// Reverse-time accumulator for one layer. Call [`LifBackward::step`] for
/// `t = T-1, ..., 0`.
#[derive(Debug, Clone)]
pub struct LifBackward<S> {
    carry: Option<Tensor<S>>,
    pub d_v_th: S,
    pub d_leak: S,
    config: LifConfig,
}

impl<S: Scalar> LifBackward<S> {
    pub fn new(config: LifConfig) -> Self {
        LifBackward {
            carry: None,
            d_v_th: S::zero(),
            d_leak: S::zero(),
            config,
        }
    }

    /// Consumes `dL/do[t]` and returns `dL/dI[t]`.
    pub fn step(&mut self, rec: &StepRecord<S>, upstream: Option<&Tensor<S>>, params: &LifParams<S>) -> Tensor<S> {
        let gamma = S::lit(self.config.gamma);
        let v = params.v_th;
        let inv_v = S::one() / v;
        let inv_v2 = inv_v * inv_v;
        let n = rec.u.len();
        let mut du = self.carry.take().unwrap_or_else(|| Tensor::zeros(rec.u.shape()));
        let mut d_v_th = S::zero();
        let mut d_leak = S::zero();
        {
            let d = du.data_mut();
            for i in 0..n {
                if let Some(g) = upstream {
                    let gs = g.data()[i] * surrogate_grad(rec.z.data()[i], gamma);
                    if gs != S::zero() {
                        d[i] += gs * inv_v;
                        d_v_th -= gs * rec.u.data()[i] * inv_v2;
                    }
                }
                match self.config.reset {
                    ResetMode::Soft => {
                        d_v_th -= d[i] * rec.o_prev.data()[i];
                        d_leak += d[i] * rec.u_prev.data()[i];
                    }
                    ResetMode::Hard => {
                        d_leak += d[i] * rec.u_prev.data()[i] * (S::one() - rec.o_prev.data()[i]);
                    }
                }
            }
        }
        self.d_v_th += d_v_th;
        self.d_leak += d_leak;
        let carry = match self.config.reset {
            ResetMode::Soft => du.map(|x| params.leak * x),
            ResetMode::Hard => {
                let mut c = du.map(|x| params.leak * x);
                for (c, &o) in c.data_mut().iter_mut().zip(rec.o_prev.data()) {
                    *c *= S::one() - o;
                }
                c
            }
        };
        self.carry = Some(carry);
        du
    }
}

#[derive(Debug, Clone)]
pub struct LifGrads<S> {
    /// `dL/dI[t]` for every timestep.
    pub d_current: Vec<Tensor<S>>,
    pub d_v_th: S,
    pub d_leak: S,
}

/// Full backward pass of one layer over a complete trace, given `dL/do[t]`
/// for every timestep.
pub fn lif_backward<S: Scalar>(
    trace: &SpikeTrace<S>,
    upstream: &[Tensor<S>],
    params: &LifParams<S>,
    config: LifConfig,
) -> Result<LifGrads<S>> {
    if !trace.is_complete() || upstream.len() != trace.timesteps() {
        return Err(Error::IncompleteTrace {
            have: trace.steps().len().min(upstream.len()),
            need: trace.timesteps(),
        });
    }
    let mut back = LifBackward::new(config);
    let mut d_current = vec![Tensor::zeros(&[0]); trace.timesteps()];
    for t in (0..trace.timesteps()).rev() {
        d_current[t] = back.step(&trace.steps()[t], Some(&upstream[t]), params);
    }
    Ok(LifGrads {
        d_current,
        d_v_th: back.d_v_th,
        d_leak: back.d_leak,
    })
}
